#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "babelcalib/dataset.hpp"
#include "babelcalib/models.hpp"
#include "babelcalib/optim.hpp"
#include "babelcalib/types.hpp"

namespace babelcalib {

/// One sample of the estimated radial profile: a point of the back-projected
/// ray at retinal radius r, so (R, Z) = (r, psi(r)).
struct ProfileSample {
  double r = 0.0;
  double R = 0.0;
  double Z = 1.0;
};

inline std::vector<ProfileSample> sample_profile(const BackProjCamera& cam, int K,
                                                 double radius_scale = 1.0) {
  std::vector<ProfileSample> out;
  out.reserve(K);
  const double r_hi = cam.profile.r_max * radius_scale;
  for (int k = 0; k < K; ++k) {
    const double r = K == 1 ? 0.0 : r_hi * k / static_cast<double>(K - 1);
    out.push_back({r, r, cam.profile.psi(r)});
  }
  return out;
}

/// Residuals of the profile-matching objective sum_k (phi(r_k, psi(r_k)) - r_k)^2.
inline double profile_objective(const TargetModel& m, std::span<const ProfileSample> samples) {
  double J = 0.0;
  for (const ProfileSample& s : samples) {
    const double r = phi_or_nan(m, s.R, s.Z);
    const double d = std::isfinite(r) ? r - s.r : 10.0 * (1.0 + s.r);
    J += d * d;
  }
  return J;
}

namespace detail {

inline VecX linear_least_squares(const MatX& A, const VecX& b, double* cond = nullptr) {
  Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VecX& sv = svd.singularValues();
  if (cond) *cond = sv(0) / std::max(sv(sv.size() - 1), 1e-300);
  return svd.solve(b);
}

inline TargetModel fit_bc(std::span<const ProfileSample> samples) {
  std::vector<double> rho, rhs;
  for (const ProfileSample& s : samples) {
    if (s.Z <= 1e-9) continue;  // BC cannot image the backward hemisphere
    rho.push_back(s.R / s.Z);
    rhs.push_back(s.r - s.R / s.Z);
  }
  if (rho.size() < 3) raise(Err::RegressionDiverged, "too few valid samples for BC");
  MatX A(rho.size(), 2);
  VecX b(rho.size());
  for (std::size_t i = 0; i < rho.size(); ++i) {
    const double p = rho[i];
    A(i, 0) = p * p * p;
    A(i, 1) = p * p * p * p * p;
    b(i) = rhs[i];
  }
  const VecX k = linear_least_squares(A, b);
  return {ModelKind::BC, k, 1.0};
}

inline TargetModel fit_kb(std::span<const ProfileSample> samples) {
  MatX A(samples.size(), 4);
  VecX b(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double z = std::atan2(samples[i].R, samples[i].Z);
    const double z2 = z * z;
    A(i, 0) = z * z2;
    A(i, 1) = A(i, 0) * z2;
    A(i, 2) = A(i, 1) * z2;
    A(i, 3) = A(i, 2) * z2;
    b(i) = samples[i].r - z;
  }
  const VecX k = linear_least_squares(A, b);
  return {ModelKind::KB, k, 1.0};
}

inline TargetModel fit_ucm(std::span<const ProfileSample> samples) {
  // R (xi + 1) = r (xi d + Z)  =>  xi (R - r d) = r Z - R, linear in xi.
  double num = 0.0, den = 0.0;
  int used = 0;
  for (const ProfileSample& s : samples) {
    const double d = std::hypot(s.R, s.Z);
    const double a = s.R - s.r * d;
    const double b = s.r * s.Z - s.R;
    if (!std::isfinite(a) || !std::isfinite(b)) continue;
    num += a * b;
    den += a * a;
    ++used;
  }
  if (used < 2 || den < 1e-300) raise(Err::RegressionDiverged, "degenerate UCM system");
  double xi = num / den;
  if (xi < 0.0 && xi > -1e-6) xi = 0.0;
  TargetModel m{ModelKind::UCM, VecX::Constant(1, xi), 1.0};
  if (!m.params_valid()) raise(Err::InvalidParams, "UCM xi out of range");
  return m;
}

inline TargetModel fit_eucm(std::span<const ProfileSample> samples) {
  // Squaring R - r((1-a)Z) = r a sqrt(b R^2 + Z^2) yields a system linear in
  // (A, B) = (alpha, alpha^2 beta):  2 r Z p A - r^2 R^2 B = -p^2, p = R - r Z.
  std::vector<std::array<double, 3>> rows;
  for (const ProfileSample& s : samples) {
    const double p = s.R - s.r * s.Z;
    rows.push_back({2.0 * s.r * s.Z * p, -s.r * s.r * s.R * s.R, -p * p});
  }
  MatX A(rows.size(), 2);
  VecX b(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    A(i, 0) = rows[i][0];
    A(i, 1) = rows[i][1];
    b(i) = rows[i][2];
  }
  const VecX sol = linear_least_squares(A, b);
  double alpha = sol(0), beta;
  if (std::abs(alpha) < 1e-9) {
    alpha = std::max(alpha, 0.0);
    beta = 1.0;  // pinhole limit: beta unidentifiable
  } else {
    beta = sol(1) / (alpha * alpha);
  }
  TargetModel m{ModelKind::EUCM, Eigen::Vector2d(alpha, beta), 1.0};
  if (!m.params_valid())
    raise(Err::InvalidParams, "EUCM parameters out of range (alpha=" + std::to_string(alpha) +
                                  ", beta=" + std::to_string(beta) + ")");
  return m;
}

inline TargetModel fit_div(std::span<const ProfileSample> samples, const BackProjCamera& cam) {
  // Matching the division back-projection requires psi_theta(r) = psi(r).
  MatX A(samples.size(), 3);
  VecX b(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double r = samples[i].r;
    A(i, 0) = r * r;
    A(i, 1) = r * r * r;
    A(i, 2) = r * r * r * r;
    b(i) = cam.profile.psi(r) - 1.0;
  }
  const VecX a = linear_least_squares(A, b);
  return {ModelKind::DIV, a, cam.profile.r_max};
}

/// Grid-seeded LM for the two non-linear families (FOV, DS).
template <class MakeModel>
TargetModel fit_gridded(std::span<const ProfileSample> samples, MakeModel&& make,
                        std::span<const VecX> seeds) {
  double best_J = std::numeric_limits<double>::infinity();
  VecX best = seeds.empty() ? VecX() : seeds[0];
  for (const VecX& s : seeds) {
    const TargetModel m = make(s);
    if (!m.params_valid()) continue;
    const double J = profile_objective(m, samples);
    if (J < best_J) {
      best_J = J;
      best = s;
    }
  }
  if (!std::isfinite(best_J)) raise(Err::RegressionDiverged, "no valid grid seed");

  const auto residuals = [&](const VecX& x, VecX& r) {
    const TargetModel m = make(x);
    if (!m.params_valid()) return false;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double ri = phi_or_nan(m, samples[i].R, samples[i].Z);
      if (!std::isfinite(ri)) return false;
      r[static_cast<Eigen::Index>(i)] = ri - samples[i].r;
    }
    return true;
  };
  VecX x = best;
  LMOptions opt;
  opt.max_iterations = 80;
  levenberg_marquardt(residuals, x, static_cast<int>(samples.size()), opt);
  const TargetModel refined = make(x);
  // Keep whichever scores better under the true objective.
  if (refined.params_valid() && profile_objective(refined, samples) <= best_J) return refined;
  return make(best);
}

}  // namespace detail

/// Fit a target family's radial profile to the estimated division-model
/// back-projection by minimizing sum_k (phi_theta(r_k, psi(r_k)) - r_k)^2.
inline TargetModel regress_model(ModelKind kind, const BackProjCamera& cam, int K = 100,
                                 double radius_scale = 1.0) {
  const std::vector<ProfileSample> samples = sample_profile(cam, K, radius_scale);
  TargetModel m;
  switch (kind) {
    case ModelKind::BC: m = detail::fit_bc(samples); break;
    case ModelKind::KB: m = detail::fit_kb(samples); break;
    case ModelKind::UCM: m = detail::fit_ucm(samples); break;
    case ModelKind::EUCM: m = detail::fit_eucm(samples); break;
    case ModelKind::DIV: m = detail::fit_div(samples, cam); break;
    case ModelKind::DIV_EVEN:
      return cam.as_target_model();
    case ModelKind::FOV: {
      std::vector<VecX> seeds;
      for (int i = 1; i <= 20; ++i) seeds.push_back(VecX::Constant(1, 0.01 + (M_PI - 0.02) * i / 20.0));
      m = detail::fit_gridded(samples, [](const VecX& x) {
        return TargetModel{ModelKind::FOV, x, 1.0};
      }, seeds);
      break;
    }
    case ModelKind::DS: {
      std::vector<VecX> seeds;
      for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 20; ++j)
          seeds.push_back(Eigen::Vector2d(-1.0 + 2.0 * i / 19.0, j / 19.0));
      m = detail::fit_gridded(samples, [](const VecX& x) {
        return TargetModel{ModelKind::DS, x, 1.0};
      }, seeds);
      break;
    }
  }
  m.r_max = cam.profile.r_max;
  if (!m.params_valid()) raise(Err::InvalidParams, "regressed parameters out of range");
  return m;
}

/// Linear Kannala-Brandt fit from back-projected correspondences: solve the
/// stacked system in (k1..k4) with right-hand side r_i - omega_i.
inline TargetModel kb_from_rays(std::span<const Correspondence> corrs,
                                const BackProjCamera& cam) {
  if (corrs.size() < 4) raise(Err::DegenerateConfiguration, "need at least 4 correspondences");
  MatX A(corrs.size(), 4);
  VecX b(corrs.size());
  double omega_lo = M_PI, omega_hi = 0.0;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const Vec3 ray = cam.back_project(corrs[i].u);
    const double R = std::hypot(ray.x(), ray.y());
    const double omega = std::atan2(R, ray.z());
    const double r = cam.intrinsics.to_sensor(corrs[i].u).norm();
    const double w2 = omega * omega;
    A(i, 0) = omega * w2;
    A(i, 1) = A(i, 0) * w2;
    A(i, 2) = A(i, 1) * w2;
    A(i, 3) = A(i, 2) * w2;
    b(i) = r - omega;
    omega_lo = std::min(omega_lo, omega);
    omega_hi = std::max(omega_hi, omega);
  }
  double cond = 0.0;
  const VecX k = detail::linear_least_squares(A, b, &cond);
  if (cond > 1e12 || omega_hi - omega_lo < 1e-8)
    raise(Err::IllConditioned, "polar angles span too narrow a range");
  return {ModelKind::KB, k, cam.profile.r_max};
}

}  // namespace babelcalib
