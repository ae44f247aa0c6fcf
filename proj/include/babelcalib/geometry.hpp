#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "babelcalib/dataset.hpp"
#include "babelcalib/models.hpp"
#include "babelcalib/optim.hpp"
#include "babelcalib/polynomial.hpp"
#include "babelcalib/types.hpp"

namespace babelcalib {

/// Rank-2 radial fundamental matrix with its factorization
/// F = [e]_x [h1^T; h2^T; 0^T], gauge-fixed to |(h1, h2)| = 1 with the
/// largest-magnitude entry positive.
struct RadialFundamental {
  Mat3 F = Mat3::Zero();
  Vec2 e = Vec2::Zero();
  Vec3 h1 = Vec3::Zero();
  Vec3 h2 = Vec3::Zero();
};

namespace detail {

inline bool points_collinear(std::span<const Vec2> pts) {
  Vec2 mean = Vec2::Zero();
  for (const Vec2& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  double spread = 0.0;
  for (const Vec2& p : pts) spread = std::max(spread, (p - mean).norm());
  Vec2 dir = Vec2::Zero();
  for (const Vec2& p : pts) {
    const Vec2 d = p - mean;
    if (d.norm() > 0.5 * spread) {
      dir = d.normalized();
      break;
    }
  }
  if (dir.isZero()) return true;
  for (const Vec2& p : pts) {
    const Vec2 d = p - mean;
    if (std::abs(d.x() * dir.y() - d.y() * dir.x()) > 1e-9 * std::max(spread, 1e-12))
      return false;
  }
  return true;
}

struct Normalization {
  Mat3 T = Mat3::Identity();
  std::vector<Vec2> pts;
};

/// Hartley normalization: centroid to the origin, RMS distance sqrt(2).
inline Normalization hartley_normalize(std::span<const Vec2> pts) {
  Normalization out;
  Vec2 mean = Vec2::Zero();
  for (const Vec2& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  double rms = 0.0;
  for (const Vec2& p : pts) rms += (p - mean).squaredNorm();
  rms = std::sqrt(rms / static_cast<double>(pts.size()));
  if (rms < 1e-12) raise(Err::DegenerateConfiguration, "coincident points");
  const double s = std::sqrt(2.0) / rms;
  out.T << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
  out.pts.reserve(pts.size());
  for (const Vec2& p : pts) out.pts.push_back(s * (p - mean));
  return out;
}

inline void fix_sign(Mat3& F) {
  Eigen::Index r, c;
  F.cwiseAbs().maxCoeff(&r, &c);
  if (F(r, c) < 0) F = -F;
}

}  // namespace detail

/// Center of projection: dehomogenized left null vector of F.
inline Vec2 center_from_F(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU);
  const Vec3 n = svd.matrixU().col(2);
  if (std::abs(n.z()) < 1e-12 * n.norm())
    raise(Err::CenterAtInfinity, "left null vector has ~zero third coordinate");
  return {n.x() / n.z(), n.y() / n.z()};
}

/// Factor a rank-2 F into (e, h1, h2). Throws CenterAtInfinity when the left
/// null vector cannot be dehomogenized.
inline RadialFundamental factor_radial_F(const Mat3& F_in) {
  RadialFundamental out;
  out.e = center_from_F(F_in);
  // With e normalized to (e_x, e_y, 1): row1(F) = -h2^T, row2(F) = h1^T.
  Vec3 h1 = F_in.row(1);
  Vec3 h2 = -F_in.row(0);
  const double s = std::sqrt(h1.squaredNorm() + h2.squaredNorm());
  if (s < 1e-300) raise(Err::DegenerateConfiguration, "zero factor rows");
  h1 /= s;
  h2 /= s;
  double mx = 0.0;
  for (int i = 0; i < 3; ++i) mx = std::abs(h1[i]) > std::abs(mx) ? h1[i] : mx;
  for (int i = 0; i < 3; ++i) mx = std::abs(h2[i]) > std::abs(mx) ? h2[i] : mx;
  if (mx < 0) {
    h1 = -h1;
    h2 = -h2;
  }
  out.h1 = h1;
  out.h2 = h2;
  Mat3 M = Mat3::Zero();
  M.row(0) = h1;
  M.row(1) = h2;
  out.F = skew(Vec3(out.e.x(), out.e.y(), 1.0)) * M;
  return out;
}

inline Vec3 epiline(const Mat3& F, const Vec2& x) { return F * Vec3(x.x(), x.y(), 1.0); }

/// Signed perpendicular distance of pixel u to the epiline of x.
inline double epipolar_distance(const Mat3& F, const Vec2& u, const Vec2& x) {
  const Vec3 l = epiline(F, x);
  const double den = std::hypot(l.x(), l.y());
  if (den < 1e-300) return std::numeric_limits<double>::infinity();
  return (l.x() * u.x() + l.y() * u.y() + l.z()) / den;
}

/// 7-point (or overdetermined) solver for the radial fundamental matrix.
/// Builds the stacked Kronecker system, takes the 2-D null space, and
/// enforces det F = 0 via the cubic pencil. Returns rank-2 candidates,
/// Frobenius-normalized with a deterministic sign.
inline std::vector<Mat3> solve_radial_F(std::span<const Correspondence> corrs) {
  const std::size_t n = corrs.size();
  if (n < 7) raise(Err::DegenerateConfiguration, "at least 7 correspondences required");

  std::vector<Vec2> us, xs;
  us.reserve(n);
  xs.reserve(n);
  for (const Correspondence& c : corrs) {
    us.push_back(c.u);
    xs.push_back(c.X);
  }
  if (detail::points_collinear(xs))
    raise(Err::DegenerateConfiguration, "board fiducials are collinear");
  if (detail::points_collinear(us))
    raise(Err::DegenerateConfiguration, "detected corners are collinear");
  const detail::Normalization nu = detail::hartley_normalize(us);
  const detail::Normalization nx = detail::hartley_normalize(xs);

  // An exact-pinhole view yields a 3-D null space (the center is then
  // unobservable); any two null vectors still give a valid pencil, so no
  // rank gate beyond the collinearity checks above.
  MatX A(n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 u(nu.pts[i].x(), nu.pts[i].y(), 1.0);
    const Vec3 x(nx.pts[i].x(), nx.pts[i].y(), 1.0);
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) A(i, 3 * j + k) = x[j] * u[k];  // column-major vec(F)
  }
  Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeFullV);

  const auto unvec = [](const VecX& v) {
    Mat3 F;
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) F(k, j) = v(3 * j + k);
    return F;
  };
  const Mat3 F1 = unvec(svd.matrixV().col(8));
  const Mat3 F2 = unvec(svd.matrixV().col(7));

  // det(F1 + t F2) = c0 + c1 t + c2 t^2 + c3 t^3
  const auto det_cols = [](const Vec3& a, const Vec3& b, const Vec3& c) {
    return a.dot(b.cross(c));
  };
  const Vec3 a1 = F1.col(0), a2 = F1.col(1), a3 = F1.col(2);
  const Vec3 b1 = F2.col(0), b2 = F2.col(1), b3 = F2.col(2);
  const double c0 = det_cols(a1, a2, a3);
  const double c1 = det_cols(b1, a2, a3) + det_cols(a1, b2, a3) + det_cols(a1, a2, b3);
  const double c2 = det_cols(a1, b2, b3) + det_cols(b1, a2, b3) + det_cols(b1, b2, a3);
  const double c3 = det_cols(b1, b2, b3);

  std::vector<double> ts;
  const double cmax = std::max({std::abs(c0), std::abs(c1), std::abs(c2), std::abs(c3)});
  double roots[3];
  if (cmax == 0.0) {
    ts.push_back(0.0);  // pencil identically singular
  } else if (std::abs(c3) < 1e-12 * cmax) {
    const int nr = solve_quadratic(c2, c1, c0, roots);
    ts.assign(roots, roots + nr);
  } else {
    const int nr = solve_cubic(c3, c2, c1, c0, roots);
    if (nr == 0) raise(Err::NoRealSolution, "cubic with no real root");
    ts.assign(roots, roots + nr);
  }

  std::vector<Mat3> out;
  const auto add_candidate = [&](Mat3 Fn) {
    Mat3 F = nu.T.transpose() * Fn * nx.T;
    Eigen::JacobiSVD<Mat3> s3(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec3 sig = s3.singularValues();
    sig(2) = 0.0;
    F = s3.matrixU() * sig.asDiagonal() * s3.matrixV().transpose();
    const double norm = F.norm();
    if (norm < 1e-300) return;
    F /= norm;
    detail::fix_sign(F);
    out.push_back(F);
  };
  for (double t : ts) add_candidate(F1 + t * F2);
  if (cmax > 0.0 && std::abs(c3) < 1e-12 * cmax) add_candidate(F2);
  if (out.empty()) raise(Err::NoRealSolution, "no rank-2 candidate");

  // Order by consistency: epipolar-inlier count at 3 px, ties by mean
  // distance. The first candidate is the one "kept" downstream.
  std::vector<std::pair<std::pair<int, double>, std::size_t>> rank;
  for (std::size_t i = 0; i < out.size(); ++i) {
    int inl = 0;
    double sum = 0.0;
    for (const Correspondence& c : corrs) {
      const double d = std::abs(epipolar_distance(out[i], c.u, c.X));
      if (d < 3.0) ++inl;
      sum += std::min(d, 1e6);
    }
    rank.push_back({{-inl, sum}, i});
  }
  std::sort(rank.begin(), rank.end());
  std::vector<Mat3> sorted;
  sorted.reserve(out.size());
  for (const auto& [key, i] : rank) sorted.push_back(out[i]);
  return sorted;
}

/// Corners projected onto their epilines (the minimal displacement making
/// the epipolar constraint exact).
inline std::vector<Vec2> correct_corners(const Mat3& F, std::span<const Correspondence> corrs) {
  std::vector<Vec2> out;
  out.reserve(corrs.size());
  for (const Correspondence& c : corrs) {
    const Vec3 l = epiline(F, c.X);
    const double den = l.x() * l.x() + l.y() * l.y();
    if (den < 1e-300) {
      out.push_back(c.u);
      continue;
    }
    const double lam = (l.x() * c.u.x() + l.y() * c.u.y() + l.z()) / den;
    out.push_back(c.u - lam * Vec2(l.x(), l.y()));
  }
  return out;
}

struct RefineFResult {
  RadialFundamental F;
  std::vector<Vec2> corrected;
  bool converged = false;
  double initial_cost = 0.0;
  double final_cost = 0.0;
};

/// Refine (e, h1, h2) by minimizing the perpendicular displacements of the
/// corners to their epilines, then project corners onto the refined lines.
inline RefineFResult refine_F(std::span<const Correspondence> corrs, const Mat3& F0) {
  if (corrs.size() < 8)
    raise(Err::DegenerateConfiguration, "at least 8 correspondences required");
  const RadialFundamental init = factor_radial_F(F0);

  const auto build = [](const VecX& x) {
    Mat3 M = Mat3::Zero();
    M.row(0) = Vec3(x[2], x[3], x[4]);
    M.row(1) = Vec3(x[5], x[6], x[7]);
    return Mat3(skew(Vec3(x[0], x[1], 1.0)) * M);
  };
  const auto residuals = [&](const VecX& x, VecX& r) {
    const Mat3 F = build(x);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const double d = epipolar_distance(F, corrs[i].u, corrs[i].X);
      if (!std::isfinite(d)) return false;
      r[static_cast<Eigen::Index>(i)] = d;
    }
    return true;
  };

  VecX x(8);
  x << init.e.x(), init.e.y(), init.h1.x(), init.h1.y(), init.h1.z(), init.h2.x(),
      init.h2.y(), init.h2.z();
  LMOptions opt;
  opt.max_iterations = 50;
  const LMSummary summary =
      levenberg_marquardt(residuals, x, static_cast<int>(corrs.size()), opt);

  RefineFResult out;
  out.converged = summary.converged;
  out.initial_cost = summary.initial_cost;
  out.final_cost = summary.final_cost;
  const Mat3 F_refined = out.converged ? build(x) : F0;
  Mat3 Fn = F_refined / F_refined.norm();
  detail::fix_sign(Fn);
  out.F = factor_radial_F(Fn);
  out.corrected = correct_corners(out.F.F, corrs);
  return out;
}

/// Rotation and in-plane translation candidates from the orthonormality of
/// the first two rotation columns. The discrete sign choices are returned
/// for downstream cheirality gating.
struct PartialPose {
  Mat3 R = Mat3::Identity();
  Vec2 t_xy = Vec2::Zero();
  double nu = 1.0;  // scale between the estimated F and the metric F_r
};

inline std::vector<PartialPose> solve_pose(const RadialFundamental& rf, double aspect) {
  const Vec3& h1 = rf.h1;
  const Vec3& h2 = rf.h2;
  const double a2 = aspect * aspect;
  const double c1 = h1.x() * h1.x() / a2 + h2.x() * h2.x();
  const double c2 = h1.y() * h1.y() / a2 + h2.y() * h2.y();
  const double c12 = h1.x() * h1.y() / a2 + h2.x() * h2.y();

  const double disc = std::sqrt((c2 - c1) * (c2 - c1) + 4.0 * c12 * c12);
  const double p = std::max(0.0, ((c2 - c1) + disc) / 2.0);  // r31^2 * nu^2
  const double q = std::max(0.0, p - (c2 - c1));             // r32^2 * nu^2

  std::vector<std::pair<double, double>> ws;
  if (std::max(p, q) <= 1e-14 * (c1 + c2)) {
    ws.emplace_back(0.0, 0.0);  // fronto-parallel: third-row entries vanish
  } else if (p >= q) {
    const double w1 = std::sqrt(p);
    ws.emplace_back(w1, -c12 / w1);
    ws.emplace_back(-w1, c12 / w1);
  } else {
    const double w2 = std::sqrt(q);
    ws.emplace_back(-c12 / w2, w2);
    ws.emplace_back(c12 / w2, -w2);
  }

  std::vector<PartialPose> out;
  for (const auto& [w1, w2] : ws) {
    const double nu2 = c1 + w1 * w1;
    if (nu2 <= 0.0) raise(Err::NoValidRotation, "degenerate factor rows");
    for (double nu : {std::sqrt(nu2), -std::sqrt(nu2)}) {
      PartialPose pp;
      const Vec3 r1(h1.x() / (aspect * nu), h2.x() / nu, w1 / nu);
      const Vec3 r2(h1.y() / (aspect * nu), h2.y() / nu, w2 / nu);
      pp.R.col(0) = r1;
      pp.R.col(1) = r2;
      pp.R.col(2) = r1.cross(r2);
      pp.t_xy = {h1.z() / (aspect * nu), h2.z() / nu};
      pp.nu = nu;
      out.push_back(pp);
    }
  }
  return out;
}

/// Linear solve for focal length, division coefficients and target depth
/// (two rows per correspondence, cross-product elimination of the ray
/// scale). Radii are pre-scaled internally for conditioning.
struct IntrinsicsDepth {
  double f = 0.0;
  VecX lambdas;  // normalized division coefficients
  double t_z = 0.0;
  double cond = 0.0;
  double residual_rms = 0.0;
};

inline IntrinsicsDepth solve_intrinsics_depth(std::span<const Vec2> u_px,
                                              std::span<const Vec2> X_board,
                                              const PartialPose& pose, const Vec2& e,
                                              double aspect, int degree) {
  const int N = degree;
  const std::size_t n = u_px.size();
  const int cols = N + 2;
  if (static_cast<int>(2 * n) < cols)
    raise(Err::DegenerateConfiguration, "too few correspondences for the linear solve");

  const Vec3 h1(pose.R(0, 0), pose.R(0, 1), pose.t_xy.x());
  const Vec3 h2(pose.R(1, 0), pose.R(1, 1), pose.t_xy.y());
  const Vec2 h3(pose.R(2, 0), pose.R(2, 1));

  double s_r = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 up((u_px[i].x() - e.x()) / aspect, u_px[i].y() - e.y());
    s_r = std::max(s_r, up.norm());
  }
  if (s_r < 1e-12) raise(Err::DegenerateConfiguration, "all points at the center");

  MatX A = MatX::Zero(2 * n, cols);
  VecX b(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 x(X_board[i].x(), X_board[i].y(), 1.0);
    const Vec2 up((u_px[i].x() - e.x()) / aspect, u_px[i].y() - e.y());
    const double xp = h1.dot(x), yp = h2.dot(x), zp = h3.dot(x.head<2>());
    const double rt2 = up.squaredNorm() / (s_r * s_r);
    double pw = rt2;
    A(2 * i, 0) = xp;
    A(2 * i + 1, 0) = yp;
    for (int k = 1; k <= N; ++k, pw *= rt2) {
      A(2 * i, k) = xp * pw;
      A(2 * i + 1, k) = yp * pw;
    }
    A(2 * i, cols - 1) = -up.x();
    A(2 * i + 1, cols - 1) = -up.y();
    b(2 * i) = up.x() * zp;
    b(2 * i + 1) = up.y() * zp;
  }

  Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VecX& sv = svd.singularValues();
  const double cond = sv(0) / std::max(sv(cols - 1), 1e-300);
  if (cond > 1e12) raise(Err::IllConditioned, "intrinsics system condition number too large");
  const VecX sol = svd.solve(b);

  IntrinsicsDepth out;
  out.cond = cond;
  out.f = sol(0);
  if (!(out.f > 0.0)) raise(Err::NegativeFocal, "non-positive focal length");
  out.t_z = sol(cols - 1);
  out.lambdas = VecX::Zero(N);
  double f_pow = out.f;  // f^{2k-1}
  double s_pow = s_r * s_r;
  for (int k = 1; k <= N; ++k) {
    out.lambdas(k - 1) = sol(k) / s_pow * f_pow;
    f_pow *= out.f * out.f;
    s_pow *= s_r * s_r;
  }
  out.residual_rms = std::sqrt((A * sol - b).squaredNorm() / static_cast<double>(2 * n));
  return out;
}

// --- P3P -----------------------------------------------------------------

namespace detail {

/// Exact rigid alignment of three non-collinear point pairs via matched
/// orthonormal frames.
inline Pose align_three_points(const std::array<Vec3, 3>& P, const std::array<Vec3, 3>& Y) {
  const auto frame = [](const std::array<Vec3, 3>& q) {
    Mat3 M;
    const Vec3 e1 = (q[1] - q[0]).normalized();
    Vec3 e2 = (q[2] - q[0]) - (q[2] - q[0]).dot(e1) * e1;
    e2.normalize();
    M.col(0) = e1;
    M.col(1) = e2;
    M.col(2) = e1.cross(e2);
    return M;
  };
  Pose pose;
  pose.R = frame(Y) * frame(P).transpose();
  pose.t = ((Y[0] - pose.R * P[0]) + (Y[1] - pose.R * P[1]) + (Y[2] - pose.R * P[2])) / 3.0;
  return pose;
}

}  // namespace detail

/// Perspective-3-point: all poses placing the three board points on the
/// three rays. Classical distance formulation reduced to a quartic.
inline std::vector<Pose> p3p(const std::array<Vec3, 3>& rays_in,
                             const std::array<Vec3, 3>& points) {
  std::array<Vec3, 3> f = rays_in;
  for (Vec3& v : f) {
    const double n = v.norm();
    if (n < 1e-300) raise(Err::DegenerateTriple, "zero ray");
    v /= n;
  }
  const double scale2 = (points[1] - points[0]).squaredNorm() +
                        (points[2] - points[0]).squaredNorm();
  if ((points[1] - points[0]).cross(points[2] - points[0]).norm() < 1e-10 * scale2)
    raise(Err::DegenerateTriple, "collinear board points");
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j)
      if (f[i].dot(f[j]) > 1.0 - 1e-12) raise(Err::DegenerateTriple, "coincident rays");

  const double a = (points[1] - points[2]).norm();
  const double b = (points[0] - points[2]).norm();
  const double c = (points[0] - points[1]).norm();
  const double cosA = f[1].dot(f[2]);
  const double cosB = f[0].dot(f[2]);
  const double cosC = f[0].dot(f[1]);
  const double ab2 = (a * a) / (b * b);
  const double cb2 = (c * c) / (b * b);

  // D(v), E(v) quadratics from the pairwise distance ratios (s2 = u s1,
  // s3 = v s1): u^2 - 2 cosC u + D(v) = 0 and u^2 - 2 cosA v u + E(v) = 0.
  const std::array<double, 3> D = {1.0 - cb2, 2.0 * cosB * cb2, -cb2};
  const std::array<double, 3> E = {-ab2, 2.0 * cosB * ab2, 1.0 - ab2};
  std::array<double, 3> G;  // E - D
  for (int i = 0; i < 3; ++i) G[i] = E[i] - D[i];

  // Quartic in v: G^2 - 4 cosC G H + 4 D H^2 = 0 with H(v) = cosA v - cosC.
  std::array<double, 5> quart{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) quart[i + j] += G[i] * G[j];
  const std::array<double, 2> H = {-cosC, cosA};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) quart[i + j] -= 4.0 * cosC * G[i] * H[j];
  std::array<double, 3> H2 = {H[0] * H[0], 2.0 * H[0] * H[1], H[1] * H[1]};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) quart[i + j] += 4.0 * D[i] * H2[j];

  const std::vector<double> vs = real_roots_in_interval(quart, 1e-8, 1e5);

  std::vector<Pose> out;
  for (double v : vs) {
    const double den_s1 = 1.0 + v * v - 2.0 * v * cosB;
    if (den_s1 <= 0.0) continue;
    const double Dv = D[0] + v * (D[1] + v * D[2]);

    // u from the first quadratic (stable roots), validated against the
    // second; the linear elimination is exact only in exact arithmetic.
    double us[2];
    int nu = solve_quadratic(1.0, -2.0 * cosC, Dv, us);
    for (int ui = 0; ui < nu; ++ui) {
      double u = us[ui];
      double vv = v;
      {  // Newton polish of (u, v) on the original pair of constraints.
        for (int it = 0; it < 10; ++it) {
          const double Dvv = D[0] + vv * (D[1] + vv * D[2]);
          const double Evv = E[0] + vv * (E[1] + vv * E[2]);
          const double Fa = u * u - 2.0 * cosC * u + Dvv;
          const double Fb = u * u - 2.0 * cosA * vv * u + Evv;
          const double j00 = 2.0 * u - 2.0 * cosC, j01 = D[1] + 2.0 * D[2] * vv;
          const double j10 = 2.0 * u - 2.0 * cosA * vv,
                       j11 = -2.0 * cosA * u + E[1] + 2.0 * E[2] * vv;
          const double det = j00 * j11 - j01 * j10;
          if (std::abs(det) < 1e-12) break;
          const double du = (Fa * j11 - j01 * Fb) / det;
          const double dv = (j00 * Fb - Fa * j10) / det;
          u -= du;
          vv -= dv;
          if (std::abs(du) + std::abs(dv) < 1e-15 * (std::abs(u) + std::abs(vv))) break;
        }
      }
      const double Dvv = D[0] + vv * (D[1] + vv * D[2]);
      const double Evv = E[0] + vv * (E[1] + vv * E[2]);
      const double resid_a = u * u - 2.0 * cosC * u + Dvv;
      const double resid_b = u * u - 2.0 * cosA * vv * u + Evv;
      if (std::abs(resid_b) > 1e-6 * (1.0 + u * u + std::abs(Evv))) continue;
      if (std::abs(resid_a) > 1e-6 * (1.0 + u * u + std::abs(Dvv))) continue;
      if (u <= 0.0 || vv <= 0.0) continue;
      const double den_pol = 1.0 + vv * vv - 2.0 * vv * cosB;
      if (den_pol <= 0.0) continue;
      const double s1p = b / std::sqrt(den_pol);
      const std::array<Vec3, 3> Y = {s1p * f[0], u * s1p * f[1], vv * s1p * f[2]};
      const Pose pose = detail::align_three_points(points, Y);
      bool dup = false;
      for (const Pose& prev : out)
        if ((prev.t - pose.t).norm() < 1e-9 * (1.0 + pose.t.norm()) &&
            rotation_angle(prev.R, pose.R) < 1e-9)
          dup = true;
      if (!dup) out.push_back(pose);
    }
  }
  return out;
}

/// Huber loss at scale tau.
inline double huber(double d, double tau) {
  const double ad = std::abs(d);
  return ad <= tau ? 0.5 * d * d : tau * (ad - 0.5 * tau);
}

/// Residual cap for unprojectable points: they contribute rho(d_sat) and
/// count as outliers.
inline constexpr double kSaturatedResidualPx = 1e4;

/// Robust P3P pose over sampled triples. `ray_of(i)` returns the unit ray of
/// correspondence i (or false when inversion fails); `project(Xc, px)`
/// reprojects camera-frame points. Candidates are pre-scored on a
/// deterministic subset, the winner re-scored on all corners.
template <class RayFn, class ProjectFn>
std::optional<Pose> estimate_pose_p3p(RayFn&& ray_of, ProjectFn&& project,
                                      std::span<const Correspondence> corrs, double tau,
                                      std::mt19937_64& rng, int max_triples = 10) {
  const std::size_t n = corrs.size();
  if (n < 4) return std::nullopt;

  std::vector<Vec3> rays(n);
  std::vector<char> has_ray(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 r;
    if (ray_of(corrs[i].u, &r)) {
      rays[i] = r.normalized();
      has_ray[i] = 1;
    }
  }

  // Deterministic scoring subset (about 20 corners).
  std::vector<std::size_t> subset;
  const std::size_t stride = std::max<std::size_t>(1, n / 20);
  for (std::size_t i = 0; i < n; i += stride) subset.push_back(i);

  const auto score = [&](const Pose& pose, std::span<const std::size_t> idx, double* loss) {
    double J = 0.0;
    int pos_depth = 0;
    for (std::size_t i : idx) {
      const Correspondence& c = corrs[i];
      const Vec3 Xc = pose * Vec3(c.X.x(), c.X.y(), 0.0);
      if (Xc.z() > 0.0) ++pos_depth;
      Vec2 px;
      double d = kSaturatedResidualPx;
      if (project(Xc, &px) == ProjStatus::Ok) d = (px - c.u).norm();
      J += huber(d, tau);
    }
    *loss = J;
    return pos_depth * 2 >= static_cast<int>(idx.size());
  };

  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::pair<double, Pose>> prefiltered;  // (subset loss, pose)
  for (int t = 0; t < max_triples; ++t) {
    std::array<std::size_t, 3> idx;
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      idx = {pick(rng), pick(rng), pick(rng)};
      ok = idx[0] != idx[1] && idx[0] != idx[2] && idx[1] != idx[2] && has_ray[idx[0]] &&
           has_ray[idx[1]] && has_ray[idx[2]];
    }
    if (!ok) continue;
    std::array<Vec3, 3> tri_rays, tri_pts;
    for (int i = 0; i < 3; ++i) {
      tri_rays[i] = rays[idx[i]];
      tri_pts[i] = Vec3(corrs[idx[i]].X.x(), corrs[idx[i]].X.y(), 0.0);
    }
    std::vector<Pose> cands;
    try {
      cands = p3p(tri_rays, tri_pts);
    } catch (const CalibError&) {
      continue;
    }
    for (const Pose& cand : cands) {
      double J = 0.0;
      if (!score(cand, subset, &J)) continue;
      prefiltered.emplace_back(J, cand);
    }
  }
  if (prefiltered.empty()) return std::nullopt;

  // The candidate minimizing the robust error over all corners wins; the
  // subset loss only prunes the field.
  std::sort(prefiltered.begin(), prefiltered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  std::optional<Pose> best;
  double best_loss = std::numeric_limits<double>::infinity();
  const std::size_t n_full = std::min<std::size_t>(prefiltered.size(), 5);
  for (std::size_t i = 0; i < n_full; ++i) {
    double J = 0.0;
    if (!score(prefiltered[i].second, all, &J)) continue;
    if (J < best_loss) {
      best_loss = J;
      best = prefiltered[i].second;
    }
  }
  return best;
}

/// Robust (Huber-IRLS) Levenberg-Marquardt over a single 6-dof pose with a
/// frozen projection function. `items` are (world point, observed pixel)
/// pairs. Monotone in the Huber loss; returns the refined pose.
template <class ProjectFn>
Pose refine_pose_huber(ProjectFn&& project, std::span<const std::pair<Vec3, Vec2>> items,
                       Pose pose, double tau, int max_iterations = 40) {
  const int n = static_cast<int>(items.size());
  const auto eval = [&](const Pose& p, std::vector<Vec2>* resid, std::vector<char>* valid) {
    double J = 0.0;
    resid->resize(n);
    valid->assign(n, 0);
    for (int i = 0; i < n; ++i) {
      Vec2 px;
      if (project(p * items[i].first, &px) == ProjStatus::Ok) {
        (*resid)[i] = px - items[i].second;
        (*valid)[i] = 1;
        J += huber((*resid)[i].norm(), tau);
      } else {
        J += huber(kSaturatedResidualPx, tau);
      }
    }
    return J;
  };

  std::vector<Vec2> resid, rp, rm, rc;
  std::vector<char> valid, vp, vm, vc;
  double J = eval(pose, &resid, &valid);
  double mu = 1e-6;

  for (int it = 0; it < max_iterations; ++it) {
    Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    const double step_h = 6e-6;
    MatX Jm = MatX::Zero(2 * n, 6);
    VecX r(2 * n);
    VecX sqw(n);
    for (int i = 0; i < n; ++i) {
      if (!valid[i]) {
        sqw[i] = 0.0;
        r[2 * i] = r[2 * i + 1] = 0.0;
        continue;
      }
      const double d = resid[i].norm();
      sqw[i] = d <= tau ? 1.0 : std::sqrt(tau / d);
      r[2 * i] = sqw[i] * resid[i].x();
      r[2 * i + 1] = sqw[i] * resid[i].y();
    }
    for (int k = 0; k < 6; ++k) {
      const auto stepped = [&](double s) {
        Pose p = pose;
        Vec3 w = Vec3::Zero(), dt = Vec3::Zero();
        if (k < 3) w[k] = s;
        else dt[k - 3] = s;
        p.R = p.R * rotation_from_axis_angle(w);
        p.t += dt;
        return p;
      };
      eval(stepped(step_h), &rp, &vp);
      eval(stepped(-step_h), &rm, &vm);
      for (int i = 0; i < n; ++i) {
        if (!vp[i] || !vm[i] || !valid[i]) continue;
        const Vec2 gr = (rp[i] - rm[i]) / (2.0 * step_h);
        Jm(2 * i, k) = sqw[i] * gr.x();
        Jm(2 * i + 1, k) = sqw[i] * gr.y();
      }
    }
    H = Jm.transpose() * Jm;
    g = Jm.transpose() * r;
    const double diag_max = std::max(H.diagonal().maxCoeff(), 1e-12);
    bool accepted = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
      Eigen::Matrix<double, 6, 6> Hd = H;
      for (int j = 0; j < 6; ++j) Hd(j, j) += mu * std::max(H(j, j), 1e-10 * diag_max);
      const Eigen::Matrix<double, 6, 1> step = Hd.ldlt().solve(-g);
      if (!step.allFinite()) {
        mu *= 4.0;
        continue;
      }
      Pose cand = pose;
      cand.R = cand.R * rotation_from_axis_angle(step.head<3>());
      cand.t += step.tail<3>();
      const double cj = eval(cand, &rc, &vc);
      if (cj < J) {
        const double rel = (J - cj) / std::max(J, 1e-300);
        pose = cand;
        J = cj;
        resid.swap(rc);
        valid.swap(vc);
        mu = std::max(mu / 3.0, 1e-12);
        accepted = true;
        if (rel < 1e-12) it = max_iterations;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted || J < 1e-30) break;
  }
  return pose;
}

/// Board-to-camera pose of one (image, board) pair from back-projected
/// corners: robust P3P selection followed by a robust pose polish. Throws
/// NoPose when no candidate passes the gates.
inline Pose pose_for_image(const BackProjCamera& cam, std::span<const Correspondence> corrs,
                           double tau, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, 0x9e3);
  const auto ray_of = [&](const Vec2& u, Vec3* r) {
    *r = cam.back_project(u);
    return true;
  };
  const auto project = [&](const Vec3& Xc, Vec2* px) { return cam.try_project(Xc, px); };
  const std::optional<Pose> pose = estimate_pose_p3p(ray_of, project, corrs, tau, rng);
  if (!pose) raise(Err::NoPose, "no P3P candidate passed cheirality and the error gate");
  std::vector<std::pair<Vec3, Vec2>> items;
  items.reserve(corrs.size());
  for (const Correspondence& c : corrs)
    items.emplace_back(Vec3(c.X.x(), c.X.y(), 0.0), c.u);
  return refine_pose_huber(project, items, *pose, tau);
}

}  // namespace babelcalib
