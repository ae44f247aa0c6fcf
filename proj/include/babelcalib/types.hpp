#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace babelcalib {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Rigid transform taking points into the parent frame: X' = R*X + t.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 operator*(const Vec3& X) const { return R * X + t; }
  Pose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  Vec3 center() const { return -(R.transpose() * t); }
};

inline Pose operator*(const Pose& a, const Pose& b) {
  return {a.R * b.R, a.R * b.t + a.t};
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Mat3 rotation_from_axis_angle(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-14) return Mat3::Identity() + skew(w);
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Vec3 axis_angle_from_rotation(const Mat3& R) {
  Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

/// Smallest angle of rotation separating two rotations, in radians.
/// Quaternion form: accurate down to ~1e-15 for near-identity differences.
inline double rotation_angle(const Mat3& Ra, const Mat3& Rb = Mat3::Identity()) {
  const Eigen::Quaterniond q(Mat3(Ra.transpose() * Rb));
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w()));
}

/// Angle between two direction vectors, accurate for tiny angles.
inline double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

enum class Err {
  // models
  NoRootInRange,
  MultipleRoots,
  DomainError,
  // geometry
  DegenerateConfiguration,
  NoRealSolution,
  CenterAtInfinity,
  NonConvergence,
  NoValidRotation,
  NegativeFocal,
  IllConditioned,
  DegenerateTriple,
  NoPose,
  // regress
  RegressionDiverged,
  InvalidParams,
  // calib
  ProposalFailed,
  CalibrationFailed,
  // synth
  UnreachablePose,
  // cli
  InputError,
};

inline const char* to_string(Err e) {
  switch (e) {
    case Err::NoRootInRange: return "NoRootInRange";
    case Err::MultipleRoots: return "MultipleRoots";
    case Err::DomainError: return "DomainError";
    case Err::DegenerateConfiguration: return "DegenerateConfiguration";
    case Err::NoRealSolution: return "NoRealSolution";
    case Err::CenterAtInfinity: return "CenterAtInfinity";
    case Err::NonConvergence: return "NonConvergence";
    case Err::NoValidRotation: return "NoValidRotation";
    case Err::NegativeFocal: return "NegativeFocal";
    case Err::IllConditioned: return "IllConditioned";
    case Err::DegenerateTriple: return "DegenerateTriple";
    case Err::NoPose: return "NoPose";
    case Err::RegressionDiverged: return "RegressionDiverged";
    case Err::InvalidParams: return "InvalidParams";
    case Err::ProposalFailed: return "ProposalFailed";
    case Err::CalibrationFailed: return "CalibrationFailed";
    case Err::UnreachablePose: return "UnreachablePose";
    case Err::InputError: return "InputError";
  }
  return "Unknown";
}

class CalibError : public std::runtime_error {
 public:
  CalibError(Err code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void raise(Err code, const std::string& msg) {
  throw CalibError(code, msg);
}

/// Exit-code class of an error: input/validation errors vs estimation failures.
inline bool is_input_error(Err e) { return e == Err::InputError; }

// --- Deterministic RNG streams ------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent substream for (seed, stream index); identical across runs
/// and thread schedules.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x51ed2701)));
}

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace babelcalib
