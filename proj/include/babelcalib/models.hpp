#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "babelcalib/polynomial.hpp"
#include "babelcalib/types.hpp"

namespace babelcalib {

/// Pixel-to-sensor mapping. The focal length absorbs the sensor scale, so
/// sensor coordinates are normalized: a unit radius corresponds to f pixels.
struct Intrinsics {
  Vec2 e = Vec2::Zero();  // center of projection, pixels
  double a = 1.0;         // pixel aspect ratio
  double f = 1.0;         // focal length, pixels

  Vec2 to_sensor(const Vec2& u) const {
    return {(u.x() - e.x()) / (a * f), (u.y() - e.y()) / f};
  }
  Vec2 to_pixel(const Vec2& m) const {
    return {a * f * m.x() + e.x(), f * m.y() + e.y()};
  }
  Mat3 K() const {
    Mat3 k = Mat3::Identity();
    k(0, 0) = a * f;
    k(1, 1) = f;
    k(0, 2) = e.x();
    k(1, 2) = e.y();
    return k;
  }
};

/// Largest retinal radius reachable inside a width x height image.
inline double max_retinal_radius(const Intrinsics& intr, double width, double height) {
  double r = 0.0;
  for (double cx : {0.0, width})
    for (double cy : {0.0, height})
      r = std::max(r, intr.to_sensor({cx, cy}).norm());
  return r;
}

/// Even-polynomial division back-projection profile psi(r) = 1 + sum l_n r^{2n}.
struct DivisionProfile {
  VecX coeffs = VecX::Zero(2);  // lambda_1 .. lambda_N
  double r_max = 1.0;           // retinal radius bound, normalized units

  double psi(double r) const {
    const double r2 = r * r;
    double v = 0.0;
    for (Eigen::Index n = coeffs.size(); n-- > 0;) v = (v + coeffs[n]) * r2;
    return 1.0 + v;
  }
};

enum class ModelKind { BC, KB, UCM, FOV, EUCM, DS, DIV, DIV_EVEN };

inline const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::BC: return "bc";
    case ModelKind::KB: return "kb";
    case ModelKind::UCM: return "ucm";
    case ModelKind::FOV: return "fov";
    case ModelKind::EUCM: return "eucm";
    case ModelKind::DS: return "ds";
    case ModelKind::DIV: return "div";
    case ModelKind::DIV_EVEN: return "div-even";
  }
  return "?";
}

inline std::optional<ModelKind> kind_from_name(const std::string& s) {
  for (ModelKind k : {ModelKind::BC, ModelKind::KB, ModelKind::UCM, ModelKind::FOV,
                      ModelKind::EUCM, ModelKind::DS, ModelKind::DIV, ModelKind::DIV_EVEN})
    if (s == kind_name(k)) return k;
  return std::nullopt;
}

/// Fixed parameter count per family; -1 means variable (DIV_EVEN).
inline int kind_param_count(ModelKind k) {
  switch (k) {
    case ModelKind::BC: return 2;
    case ModelKind::KB: return 4;
    case ModelKind::UCM: return 1;
    case ModelKind::FOV: return 1;
    case ModelKind::EUCM: return 2;
    case ModelKind::DS: return 2;
    case ModelKind::DIV: return 3;
    case ModelKind::DIV_EVEN: return -1;
  }
  return 0;
}

/// Radial projection model of one of the supported families. Backward
/// (division) kinds carry the root-search bound r_max.
struct TargetModel {
  ModelKind kind = ModelKind::DIV_EVEN;
  VecX params = VecX::Zero(2);
  double r_max = 1.0;

  bool is_backward() const { return kind == ModelKind::DIV || kind == ModelKind::DIV_EVEN; }

  bool params_valid() const {
    const int want = kind_param_count(kind);
    if (want >= 0 && params.size() != want) return false;
    if (!params.allFinite()) return false;
    switch (kind) {
      case ModelKind::UCM: return params[0] >= 0.0;
      case ModelKind::FOV: return params[0] != 0.0;
      case ModelKind::EUCM: return params[0] >= 0.0 && params[0] <= 1.0 && params[1] > 0.0;
      case ModelKind::DS: return params[1] >= 0.0 && params[1] <= 1.0;  // any xi accepted
      default: return true;
    }
  }
};

/// psi_theta coefficients (ascending powers of r) written to a caller
/// buffer of capacity >= 2 * params + 1; returns the coefficient count.
inline int backward_psi_coeffs_into(const TargetModel& m, double* c) {
  if (m.kind == ModelKind::DIV) {
    c[0] = 1.0;
    c[1] = 0.0;
    c[2] = m.params[0];
    c[3] = m.params[1];
    c[4] = m.params[2];
    return 5;
  }
  const int n = 2 * static_cast<int>(m.params.size()) + 1;
  std::fill(c, c + n, 0.0);
  c[0] = 1.0;
  for (Eigen::Index k = 0; k < m.params.size(); ++k) c[2 * (k + 1)] = m.params[k];
  return n;
}

inline std::vector<double> backward_psi_coeffs(const TargetModel& m) {
  std::vector<double> c(2 * static_cast<std::size_t>(m.params.size()) + 1);
  c.resize(backward_psi_coeffs_into(m, c.data()));
  return c;
}

enum class ProjStatus { Ok, NoRootInRange, MultipleRoots, DomainError };

/// Retinal radius r* solving r*Z - R*psi(r) = 0 in [0, r_max]; the heart of
/// projection for back-projection models. Allocation-free.
inline ProjStatus solve_backward_radius(std::span<const double> psi_coeffs, double r_max,
                                        double R, double Z, double* r_star) {
  // p(r) = Z r - R psi(r)
  double p[detail::kMaxIsolateDegree + 2];
  const int n = std::max<int>(static_cast<int>(psi_coeffs.size()), 2);
  if (n > detail::kMaxIsolateDegree + 1) return ProjStatus::DomainError;
  std::fill(p, p + n, 0.0);
  for (std::size_t i = 0; i < psi_coeffs.size(); ++i) p[i] = -R * psi_coeffs[i];
  p[1] += Z;
  int deg = n - 1;
  double maxc = 0.0;
  for (int i = 0; i < n; ++i) maxc = std::max(maxc, std::abs(p[i]));
  if (maxc == 0.0) return ProjStatus::NoRootInRange;
  while (deg > 0 && std::abs(p[deg]) <= 1e-13 * maxc) --deg;

  double roots[detail::kMaxIsolateDegree + 2];
  const int nr = detail::isolate_roots(p, deg, 0.0, r_max, roots);
  if (nr == 0) return ProjStatus::NoRootInRange;
  if (nr > 1) return ProjStatus::MultipleRoots;
  *r_star = roots[0];
  return ProjStatus::Ok;
}

/// Division-model back-projection camera: the intermediate model the whole
/// calibration is estimated in.
struct BackProjCamera {
  Intrinsics intrinsics;
  DivisionProfile profile;

  /// Unnormalized ray direction (m_x, m_y, psi(|m|)) for pixel u.
  Vec3 back_project(const Vec2& u) const {
    const Vec2 m = intrinsics.to_sensor(u);
    return {m.x(), m.y(), profile.psi(m.norm())};
  }

  ProjStatus try_project(const Vec3& X_cam, Vec2* px) const {
    const double R = std::hypot(X_cam.x(), X_cam.y());
    if (R < 1e-14 * std::max(1.0, std::abs(X_cam.z()))) {
      if (X_cam.z() <= 0.0) return ProjStatus::NoRootInRange;
      *px = intrinsics.e;
      return ProjStatus::Ok;
    }
    double psi_c[detail::kMaxIsolateDegree + 2];
    const int n = 2 * static_cast<int>(profile.coeffs.size()) + 1;
    if (n > detail::kMaxIsolateDegree + 1) return ProjStatus::DomainError;
    std::fill(psi_c, psi_c + n, 0.0);
    psi_c[0] = 1.0;
    for (Eigen::Index k = 0; k < profile.coeffs.size(); ++k)
      psi_c[2 * (k + 1)] = profile.coeffs[k];
    double r_star = 0.0;
    const ProjStatus st = solve_backward_radius(std::span<const double>(psi_c, n),
                                                profile.r_max, R, X_cam.z(), &r_star);
    if (st != ProjStatus::Ok) return st;
    const double s = r_star / R;
    *px = intrinsics.to_pixel({s * X_cam.x(), s * X_cam.y()});
    return ProjStatus::Ok;
  }

  TargetModel as_target_model() const {
    return {ModelKind::DIV_EVEN, profile.coeffs, profile.r_max};
  }

  std::vector<double> division_coeffs() const {
    std::vector<double> c(2 * static_cast<std::size_t>(profile.coeffs.size()) + 1, 0.0);
    c[0] = 1.0;
    for (Eigen::Index n = 0; n < profile.coeffs.size(); ++n) c[2 * (n + 1)] = profile.coeffs[n];
    return c;
  }
};

inline double psi(const DivisionProfile& p, double r) { return p.psi(r); }

/// Pixel of a camera-frame point under the division model; throws on
/// out-of-range or ambiguous roots.
inline Vec2 project_division(const BackProjCamera& cam, const Vec3& X_cam) {
  Vec2 px;
  switch (cam.try_project(X_cam, &px)) {
    case ProjStatus::Ok: return px;
    case ProjStatus::NoRootInRange:
      raise(Err::NoRootInRange, "ray outside the modeled field of view");
    case ProjStatus::MultipleRoots:
      raise(Err::MultipleRoots, "multiple projection roots; model implausible");
    default:
      raise(Err::DomainError, "projection undefined");
  }
}

/// Radial forward projection phi_theta(R, Z); NaN signals a domain error.
inline double phi_or_nan(const TargetModel& m, double R, double Z) noexcept {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  switch (m.kind) {
    case ModelKind::BC: {
      if (Z <= 0.0) return nan;
      const double p = R / Z, p2 = p * p;
      return p * (1.0 + p2 * (m.params[0] + p2 * m.params[1]));
    }
    case ModelKind::KB: {
      if (R == 0.0 && Z == 0.0) return nan;
      const double z = std::atan2(R, Z), z2 = z * z;
      double poly = 0.0;
      for (int n = 3; n >= 0; --n) poly = (poly + m.params[n]) * z2;
      return z * (1.0 + poly);
    }
    case ModelKind::UCM: {
      const double den = m.params[0] * std::sqrt(R * R + Z * Z) + Z;
      if (den <= 0.0) return nan;
      return R * (m.params[0] + 1.0) / den;
    }
    case ModelKind::FOV: {
      const double w = m.params[0];
      const double num = 2.0 * R * std::tan(w / 2.0);
      if (num == 0.0 && Z == 0.0) return nan;
      return std::atan2(num, Z) / w;
    }
    case ModelKind::EUCM: {
      const double alpha = m.params[0], beta = m.params[1];
      const double d = std::sqrt(beta * R * R + Z * Z);
      const double den = alpha * d + (1.0 - alpha) * Z;
      if (den <= 0.0) return nan;
      return R / den;
    }
    case ModelKind::DS: {
      const double xi = m.params[0], alpha = m.params[1];
      const double z2 = xi * std::sqrt(R * R + Z * Z) + Z;
      const double d2 = std::sqrt(R * R + z2 * z2);
      const double den = alpha * d2 + (1.0 - alpha) * z2;
      if (den <= 0.0) return nan;
      return R / den;
    }
    case ModelKind::DIV:
    case ModelKind::DIV_EVEN: {
      if (R == 0.0) return Z > 0.0 ? 0.0 : nan;
      double psi_c[detail::kMaxIsolateDegree + 2];
      if (2 * m.params.size() + 1 > detail::kMaxIsolateDegree + 1) return nan;
      const int n = backward_psi_coeffs_into(m, psi_c);
      double r_star = 0.0;
      if (solve_backward_radius(std::span<const double>(psi_c, n), m.r_max, R, Z,
                                &r_star) != ProjStatus::Ok)
        return nan;
      return r_star;
    }
  }
  return nan;
}

inline double phi(const TargetModel& m, double R, double Z) {
  const double r = phi_or_nan(m, R, Z);
  if (!std::isfinite(r)) raise(Err::DomainError, "phi undefined for this (R, Z)");
  return r;
}

inline ProjStatus try_project_target(const TargetModel& m, const Intrinsics& intr,
                                     const Vec3& X_cam, Vec2* px) noexcept {
  const double R = std::hypot(X_cam.x(), X_cam.y());
  if (R < 1e-14 * std::max(1.0, std::abs(X_cam.z()))) {
    if (X_cam.z() <= 0.0) return ProjStatus::NoRootInRange;
    *px = intr.e;
    return ProjStatus::Ok;
  }
  const double r = phi_or_nan(m, R, X_cam.z());
  if (!std::isfinite(r) || r < 0.0)
    return m.is_backward() ? ProjStatus::NoRootInRange : ProjStatus::DomainError;
  const double s = r / R;
  *px = intr.to_pixel({s * X_cam.x(), s * X_cam.y()});
  return ProjStatus::Ok;
}

inline Vec2 project_target(const TargetModel& m, const Intrinsics& intr, const Vec3& X_cam) {
  Vec2 px;
  switch (try_project_target(m, intr, X_cam, &px)) {
    case ProjStatus::Ok: return px;
    case ProjStatus::NoRootInRange:
      raise(Err::NoRootInRange, "ray outside the modeled field of view");
    case ProjStatus::MultipleRoots:
      raise(Err::MultipleRoots, "multiple projection roots; model implausible");
    default:
      raise(Err::DomainError, "projection undefined");
  }
}

/// Pixel-to-ray inversion for any model kind. Forward kinds are inverted by
/// a monotone 1-D solve of phi(sin w, cos w) = r over the polar angle; the
/// valid angle range is probed once at construction.
class ModelBackProjector {
 public:
  ModelBackProjector(const TargetModel& model, const Intrinsics& intr)
      : model_(model), intr_(intr) {
    if (model_.is_backward()) {
      psi_coeffs_ = backward_psi_coeffs(model_);
      return;
    }
    const int n = 2048;
    grid_r_.reserve(n);
    grid_w_.reserve(n);
    double prev_r = -1.0;
    for (int i = 1; i <= n; ++i) {
      const double w = M_PI * (i / static_cast<double>(n + 1));
      const double r = phi_or_nan(model_, std::sin(w), std::cos(w));
      if (!std::isfinite(r) || r <= prev_r) break;
      grid_w_.push_back(w);
      grid_r_.push_back(r);
      prev_r = r;
    }
  }

  bool try_back_project(const Vec2& u, Vec3* ray) const {
    const Vec2 m = intr_.to_sensor(u);
    const double r = m.norm();
    if (model_.is_backward()) {
      *ray = Vec3(m.x(), m.y(), polyval(psi_coeffs_, r)).normalized();
      return true;
    }
    if (r < 1e-14) {
      *ray = Vec3(0, 0, 1);
      return true;
    }
    if (grid_r_.empty() || r > grid_r_.back()) return false;
    const auto it = std::lower_bound(grid_r_.begin(), grid_r_.end(), r);
    const std::size_t hi = static_cast<std::size_t>(it - grid_r_.begin());
    double wlo = hi == 0 ? 0.0 : grid_w_[hi - 1];
    double whi = grid_w_[hi];
    for (int k = 0; k < 80; ++k) {
      const double wm = 0.5 * (wlo + whi);
      const double rm = phi_or_nan(model_, std::sin(wm), std::cos(wm));
      if (!std::isfinite(rm)) return false;
      if (rm < r) wlo = wm;
      else whi = wm;
      if (whi - wlo < 1e-15) break;
    }
    const double w = 0.5 * (wlo + whi);
    const double s = std::sin(w) / r;
    *ray = Vec3(s * m.x(), s * m.y(), std::cos(w));
    return true;
  }

  Vec3 back_project(const Vec2& u) const {
    Vec3 ray;
    if (!try_back_project(u, &ray))
      raise(Err::NoRootInRange, "pixel outside the invertible radius range");
    return ray;
  }

  /// Largest invertible polar angle (pi for backward kinds).
  double max_angle() const {
    if (model_.is_backward()) return M_PI;
    return grid_w_.empty() ? 0.0 : grid_w_.back();
  }

 private:
  TargetModel model_;
  Intrinsics intr_;
  std::vector<double> grid_r_, grid_w_;
  std::vector<double> psi_coeffs_;  // backward kinds only
};

}  // namespace babelcalib
