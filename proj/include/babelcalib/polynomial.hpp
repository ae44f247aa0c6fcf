#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace babelcalib {

// Polynomials are coefficient vectors in ascending order: p(x) = sum c[i] x^i.

inline double polyval(std::span<const double> c, double x) {
  double v = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) v = v * x + c[i];
  return v;
}

inline std::vector<double> polyder(std::span<const double> c) {
  std::vector<double> d;
  if (c.size() <= 1) return d;
  d.resize(c.size() - 1);
  for (std::size_t i = 1; i < c.size(); ++i) d[i - 1] = c[i] * static_cast<double>(i);
  return d;
}

/// Effective degree after trimming leading coefficients that are negligible
/// relative to the largest one.
inline int poly_degree(std::span<const double> c, double rel_eps = 1e-13) {
  double maxc = 0.0;
  for (double v : c) maxc = std::max(maxc, std::abs(v));
  if (maxc == 0.0) return -1;
  for (std::size_t i = c.size(); i-- > 0;)
    if (std::abs(c[i]) > rel_eps * maxc) return static_cast<int>(i);
  return -1;
}

/// Real roots of a*x^2 + b*x + c. Numerically stable (citardauq for the
/// small root). Returns the number of roots written.
inline int solve_quadratic(double a, double b, double c, double roots[2]) {
  if (a == 0.0) {
    if (b == 0.0) return 0;
    roots[0] = -c / b;
    return 1;
  }
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return 0;
  const double sq = std::sqrt(disc);
  const double q = -0.5 * (b + (b >= 0.0 ? sq : -sq));
  int n = 0;
  roots[n++] = q / a;
  if (q != 0.0) roots[n++] = c / q;
  else roots[n++] = 0.0;
  if (n == 2 && roots[0] == roots[1]) n = 1;
  return n;
}

/// Real roots of a*x^3 + b*x^2 + c*x + d by Cardano / trigonometric method.
/// Complex-pair roots whose imaginary part is below 1e-10 relative to the
/// real part are treated as a real double root.
inline int solve_cubic(double a, double b, double c, double d, double roots[3]) {
  double maxc = std::max({std::abs(a), std::abs(b), std::abs(c), std::abs(d)});
  if (maxc == 0.0) return 0;
  if (std::abs(a) < 1e-13 * maxc) return solve_quadratic(b, c, d, roots);

  // Depressed form t^3 + p t + q with x = t - b/(3a).
  const double inv_a = 1.0 / a;
  const double b1 = b * inv_a, c1 = c * inv_a, d1 = d * inv_a;
  const double shift = b1 / 3.0;
  const double p = c1 - b1 * b1 / 3.0;
  const double q = d1 + b1 * (2.0 * b1 * b1 - 9.0 * c1) / 27.0;

  const double half_q = q / 2.0, third_p = p / 3.0;
  const double disc = half_q * half_q + third_p * third_p * third_p;

  int n = 0;
  if (disc > 0.0) {
    // One real root; the complex pair may still count as real if nearly so.
    const double sq = std::sqrt(disc);
    const double u = std::cbrt(-half_q + sq);
    const double v = std::cbrt(-half_q - sq);
    roots[n++] = u + v - shift;
    const double imag = std::abs(u - v) * std::sqrt(3.0) / 2.0;
    const double re = -(u + v) / 2.0 - shift;
    if (imag < 1e-10 * std::max(1.0, std::abs(re))) roots[n++] = re;
  } else if (disc == 0.0) {
    const double u = std::cbrt(-half_q);
    roots[n++] = 2.0 * u - shift;
    roots[n++] = -u - shift;
  } else {
    // Three distinct real roots.
    const double r = std::sqrt(-third_p);
    const double phi = std::acos(std::clamp(-half_q / (r * r * r), -1.0, 1.0));
    for (int k = 0; k < 3; ++k)
      roots[n++] = 2.0 * r * std::cos((phi + 2.0 * M_PI * k) / 3.0) - shift;
  }
  return n;
}

namespace detail {

inline constexpr int kMaxIsolateDegree = 14;

inline double polyval_n(const double* c, int n_coeffs, double x) {
  double v = 0.0;
  for (int i = n_coeffs; i-- > 0;) v = v * x + c[i];
  return v;
}

/// Safeguarded Newton inside a bracket [lo, hi] with p(lo), p(hi) of
/// opposite sign.
inline double refine_root_n(const double* c, int nc, const double* dc, int ndc, double lo,
                            double hi, double flo) {
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 100; ++it) {
    const double fx = polyval_n(c, nc, x);
    if (fx == 0.0) return x;
    if ((fx > 0.0) == (flo > 0.0)) lo = x;
    else hi = x;
    const double dfx = polyval_n(dc, ndc, x);
    double next = (dfx != 0.0) ? x - fx / dfx : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) < 1e-15 * std::max(1.0, std::abs(x))) return next;
    x = next;
  }
  return x;
}

/// Value magnitude of the polynomial at x with all-positive coefficients:
/// the natural scale for "is p(x) numerically zero" tests.
inline double polyval_abs_n(const double* c, int n_coeffs, double x) {
  const double ax = std::abs(x);
  double v = 0.0;
  for (int i = n_coeffs; i-- > 0;) v = v * ax + std::abs(c[i]);
  return v;
}

/// True only for exact-tangency-grade zeros (a few ulps of the value scale);
/// anything larger must be isolated through sign changes or it can swallow a
/// pair of genuinely distinct roots around a shallow extremum.
inline bool near_zero_n(const double* c, int n_coeffs, double x, double f) {
  return std::abs(f) <= 7e-15 * std::max(polyval_abs_n(c, n_coeffs, x), 1e-300);
}

/// All real roots of c[0..deg] in [lo, hi], written ascending to `out`
/// (capacity >= deg). Allocation-free; isolates the monotone pieces through
/// the derivative chain. The caller must pass a trimmed degree >= 1.
inline int isolate_roots(const double* c, int deg, double lo, double hi, double* out) {
  if (!(hi > lo) || deg < 1) return 0;
  if (deg == 1) {
    const double r = -c[0] / c[1];
    if (r >= lo && r <= hi) {
      out[0] = r;
      return 1;
    }
    return 0;
  }

  // Derivative chain der[L] = coefficients of the (deg - L)-th derivative.
  double der[kMaxIsolateDegree + 1][kMaxIsolateDegree + 1];
  for (int i = 0; i <= deg; ++i) der[deg][i] = c[i];
  for (int L = deg - 1; L >= 1; --L)
    for (int i = 0; i <= L; ++i) der[L][i] = der[L + 1][i + 1] * (i + 1);

  double cur[kMaxIsolateDegree + 2], nxt[kMaxIsolateDegree + 2];
  int ncur = 0;

  // Level 2 closed form.
  {
    double r2[2];
    const int n = solve_quadratic(der[2][2], der[2][1], der[2][0], r2);
    for (int i = 0; i < n; ++i)
      if (r2[i] >= lo && r2[i] <= hi) cur[ncur++] = r2[i];
    if (ncur == 2 && cur[0] > cur[1]) std::swap(cur[0], cur[1]);
  }
  if (deg == 2) {
    for (int i = 0; i < ncur; ++i) out[i] = cur[i];
    return ncur;
  }

  for (int L = 3; L <= deg; ++L) {
    const double* pc = der[L];
    const int nc = L + 1;
    const double* dc = der[L - 1];

    int nnxt = 0;
    double prev_x = lo;
    double prev_f = polyval_n(pc, nc, lo);
    bool prev_zero = near_zero_n(pc, nc, lo, prev_f);
    if (prev_zero) nxt[nnxt++] = lo;
    for (int bi = 0; bi <= ncur; ++bi) {
      const double x = bi < ncur ? cur[bi] : hi;
      const double f = polyval_n(pc, nc, x);
      const bool zero = near_zero_n(pc, nc, x, f);
      if (zero) {
        nxt[nnxt++] = x;
      } else if (!prev_zero && (f > 0.0) != (prev_f > 0.0)) {
        nxt[nnxt++] = refine_root_n(pc, nc, dc, L, prev_x, x, prev_f);
      }
      prev_x = x;
      prev_f = f;
      prev_zero = zero;
    }
    // Dedup (tangency can report the same root from both sides).
    int m = 0;
    for (int i = 0; i < nnxt; ++i)
      if (m == 0 || std::abs(nxt[i] - nxt[m - 1]) >= 1e-9 * std::max(1.0, std::abs(nxt[i])))
        nxt[m++] = nxt[i];
    ncur = m;
    for (int i = 0; i < m; ++i) cur[i] = nxt[i];
  }
  for (int i = 0; i < ncur; ++i) out[i] = cur[i];
  return ncur;
}

}  // namespace detail

/// All real roots of p in [lo, hi], ascending and deduplicated.
inline std::vector<double> real_roots_in_interval(std::span<const double> coeffs,
                                                  double lo, double hi) {
  std::vector<double> out;
  const int deg = poly_degree(coeffs);
  if (deg < 1 || !(hi > lo)) return out;
  if (deg <= detail::kMaxIsolateDegree) {
    double buf[detail::kMaxIsolateDegree + 2];
    const int n = detail::isolate_roots(coeffs.data(), deg, lo, hi, buf);
    out.assign(buf, buf + n);
    return out;
  }
  // High degrees: recurse through the derivative with heap buffers.
  const std::vector<double> dc = polyder(coeffs.first(deg + 1));
  std::vector<double> brk = real_roots_in_interval(dc, lo, hi);
  brk.insert(brk.begin(), lo);
  brk.push_back(hi);
  double prev_f = polyval(coeffs, brk[0]);
  bool prev_zero = detail::near_zero_n(coeffs.data(), deg + 1, brk[0], prev_f);
  if (prev_zero) out.push_back(brk[0]);
  for (std::size_t i = 1; i < brk.size(); ++i) {
    const double f = polyval(coeffs, brk[i]);
    const bool zero = detail::near_zero_n(coeffs.data(), deg + 1, brk[i], f);
    if (zero)
      out.push_back(brk[i]);
    else if (!prev_zero && (f > 0.0) != (prev_f > 0.0))
      out.push_back(detail::refine_root_n(coeffs.data(), deg + 1, dc.data(),
                                          static_cast<int>(dc.size()), brk[i - 1], brk[i],
                                          prev_f));
    prev_f = f;
    prev_zero = zero;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end(),
                        [&](double x, double y) {
                          return std::abs(x - y) < 1e-9 * std::max(1.0, std::abs(x));
                        }),
            out.end());
  return out;
}

}  // namespace babelcalib
