#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <functional>

#include "babelcalib/types.hpp"

namespace babelcalib {

struct LMOptions {
  int max_iterations = 100;
  double mu_init = 1e-4;
  double ftol = 1e-14;       // relative cost decrease
  double cost_floor = 1e-30; // absolute cost considered converged
  double diff_step = 6e-6;   // central-difference relative step
};

struct LMSummary {
  bool converged = false;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
};

/// Dense Levenberg-Marquardt with a numeric central-difference Jacobian.
/// `fn(x, r)` fills the residual vector and returns false if the point is
/// infeasible. Steps are accepted only when the cost decreases.
template <class ResidualFn>
LMSummary levenberg_marquardt(ResidualFn&& fn, VecX& x, int n_residuals,
                              const LMOptions& opt = {}) {
  const int n = static_cast<int>(x.size());
  VecX r(n_residuals), rp(n_residuals), rm(n_residuals);
  LMSummary out;
  if (!fn(x, r)) return out;
  double cost = r.squaredNorm();
  out.initial_cost = cost;

  MatX J(n_residuals, n);
  double mu = opt.mu_init;
  bool jacobian_fresh = false;

  for (out.iterations = 0; out.iterations < opt.max_iterations; ++out.iterations) {
    if (cost < opt.cost_floor) {
      out.converged = true;
      break;
    }
    if (!jacobian_fresh) {
      for (int j = 0; j < n; ++j) {
        const double h = opt.diff_step * std::max(1.0, std::abs(x[j]));
        VecX xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        if (!fn(xp, rp) || !fn(xm, rm)) {
          out.converged = false;
          return out;
        }
        J.col(j) = (rp - rm) / (2.0 * h);
      }
      jacobian_fresh = true;
    }
    MatX H = J.transpose() * J;
    const VecX g = J.transpose() * r;
    const double diag_max = H.diagonal().maxCoeff();
    for (int j = 0; j < n; ++j)
      H(j, j) += mu * std::max(H(j, j), 1e-12 * std::max(diag_max, 1.0));
    const VecX step = H.ldlt().solve(-g);
    const VecX x_new = x + step;
    const bool ok = fn(x_new, rp);
    const double cost_new = ok ? rp.squaredNorm() : std::numeric_limits<double>::infinity();
    if (cost_new < cost) {
      const double decrease = (cost - cost_new) / std::max(cost, 1e-300);
      x = x_new;
      r = rp;
      cost = cost_new;
      mu = std::max(mu / 3.0, 1e-12);
      jacobian_fresh = false;
      if (decrease < opt.ftol) {
        out.converged = true;
        break;
      }
    } else {
      mu *= 4.0;
      if (mu > 1e16) {
        out.converged = true;  // stalled at a (numerical) minimum
        break;
      }
    }
  }
  out.final_cost = cost;
  if (cost < opt.cost_floor) out.converged = true;
  return out;
}

}  // namespace babelcalib
