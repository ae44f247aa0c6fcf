#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace babelcalib {

/// Worker count: BABELCALIB_THREADS caps it, 0 or unset means auto.
inline int thread_count() {
  int n = 0;
  if (const char* env = std::getenv("BABELCALIB_THREADS")) n = std::atoi(env);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, n);
}

/// Index-parallel loop with deterministic per-index work; results must be
/// written to per-index slots so the outcome is schedule-independent.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const int workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

}  // namespace babelcalib
