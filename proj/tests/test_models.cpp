#include "babelcalib/models.hpp"

#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace babelcalib;

namespace {

BackProjCamera make_camera(Vec2 e, double a, double f, VecX lambdas, double r_max) {
  BackProjCamera cam;
  cam.intrinsics = {e, a, f};
  cam.profile = {std::move(lambdas), r_max};
  return cam;
}

}  // namespace

TEST(Psi, ConstantTerm) {
  DivisionProfile p{(VecX(2) << -0.3, 0.05).finished(), 2.0};
  EXPECT_DOUBLE_EQ(p.psi(0.0), 1.0);
  DivisionProfile zero{VecX::Zero(2), 2.0};
  EXPECT_DOUBLE_EQ(zero.psi(3.7), 1.0);
  DivisionProfile one{(VecX(2) << -0.1, 0.0).finished(), 2.0};
  EXPECT_DOUBLE_EQ(one.psi(1.0), 0.9);
}

TEST(BackProject, CenterGivesOpticalAxis) {
  const BackProjCamera cam =
      make_camera({700, 500}, 1.1, 420, (VecX(2) << -0.2, 0.01).finished(), 2.0);
  const Vec3 ray = cam.back_project({700, 500});
  EXPECT_NEAR(ray.x(), 0.0, 1e-15);
  EXPECT_NEAR(ray.y(), 0.0, 1e-15);
  EXPECT_NEAR(ray.z(), 1.0, 1e-15);
}

TEST(BackProject, IdentityMapping) {
  const BackProjCamera cam = make_camera({0, 0}, 1.0, 1.0, VecX::Zero(2), 10.0);
  const Vec3 ray = cam.back_project({1, 0});
  EXPECT_NEAR(ray.x(), 1.0, 1e-15);
  EXPECT_NEAR(ray.y(), 0.0, 1e-15);
  EXPECT_NEAR(ray.z(), 1.0, 1e-15);
}

TEST(ProjectDivision, PinholeReduction) {
  const BackProjCamera cam = make_camera({600, 400}, 1.0, 400, VecX::Zero(2), 3.0);
  const Vec2 px = project_division(cam, {1.0, 0.0, 2.0});
  EXPECT_NEAR(px.x(), 600 + 400 * 0.5, 1e-10);
  EXPECT_NEAR(px.y(), 400.0, 1e-10);
}

TEST(ProjectDivision, OpticalAxisMapsToCenter) {
  const BackProjCamera cam =
      make_camera({612, 403}, 1.07, 350, (VecX(2) << -0.25, 0.02).finished(), 2.0);
  const Vec2 px = project_division(cam, {0.0, 0.0, 5.0});
  EXPECT_NEAR(px.x(), 612.0, 1e-12);
  EXPECT_NEAR(px.y(), 403.0, 1e-12);
}

TEST(ProjectDivision, MatchesDenseScanOracle) {
  const BackProjCamera cam =
      make_camera({0, 0}, 1.0, 1.0, (VecX(2) << -0.05, 0.001).finished(), 3.0);
  const Vec2 px = project_division(cam, {1.0, 0.0, 1.0});
  const double r_star = px.x();  // e = 0, f = 1, ray along +x

  const auto roots = testutil::scan_backward_roots(cam.division_coeffs(), 3.0, 1.0, 1.0);
  ASSERT_EQ(roots.size(), 1u);
  EXPECT_NEAR(r_star, roots[0], 1e-12);
}

TEST(ProjectDivision, BehindCameraHasNoRoot) {
  const BackProjCamera cam = make_camera({0, 0}, 1.0, 1.0, VecX::Zero(2), 2.0);
  EXPECT_THROW(project_division(cam, {1.0, 0.0, -1.0}), CalibError);
  try {
    project_division(cam, {1.0, 0.0, -1.0});
  } catch (const CalibError& e) {
    EXPECT_EQ(e.code(), Err::NoRootInRange);
  }
}

TEST(ProjectDivision, AmbiguousProfileRaisesMultipleRoots) {
  // A wiggly profile crossed twice by the ray line: verified by the oracle.
  const BackProjCamera cam =
      make_camera({0, 0}, 1.0, 1.0, (VecX(2) << -0.4, 0.08).finished(), 2.3);
  const auto roots = testutil::scan_backward_roots(cam.division_coeffs(), 2.3, 1.0, 0.4);
  ASSERT_GE(roots.size(), 2u) << "test construction should produce >= 2 roots";
  Vec2 px;
  EXPECT_EQ(cam.try_project({1.0, 0.0, 0.4}, &px), ProjStatus::MultipleRoots);
}

TEST(Phi, Trivials) {
  EXPECT_NEAR(phi({ModelKind::UCM, VecX::Zero(1), 1.0}, 1.0, 2.0), 0.5, 1e-15);
  EXPECT_NEAR(phi({ModelKind::KB, VecX::Zero(4), 1.0}, 1.0, 1.0), M_PI / 4.0, 1e-15);
}

TEST(Phi, EucmMatchesUcmAtKnownEquivalence) {
  // EUCM(alpha = 1/2, beta = 1) == UCM(xi = 1).
  const TargetModel eucm{ModelKind::EUCM, (VecX(2) << 0.5, 1.0).finished(), 1.0};
  const TargetModel ucm{ModelKind::UCM, VecX::Constant(1, 1.0), 1.0};
  for (double w = 0.05; w < 1.5; w += 0.05) {
    const double R = std::sin(w), Z = std::cos(w);
    EXPECT_NEAR(phi(eucm, R, Z), phi(ucm, R, Z), 1e-12);
  }
}

TEST(Phi, DomainErrors) {
  EXPECT_THROW(phi({ModelKind::FOV, VecX::Constant(1, 1.0), 1.0}, 0.0, 0.0), CalibError);
  EXPECT_THROW(phi({ModelKind::BC, VecX::Zero(2), 1.0}, 1.0, -1.0), CalibError);
  EXPECT_TRUE(std::isnan(phi_or_nan({ModelKind::KB, VecX::Zero(4), 1.0}, 0.0, 0.0)));
}

TEST(ProjectTarget, PinholeArithmetic) {
  const TargetModel bc{ModelKind::BC, VecX::Zero(2), 1.0};
  const Intrinsics intr{{600, 400}, 1.0, 400};
  const Vec2 px = project_target(bc, intr, {1.0, 0.0, 1.0});
  EXPECT_NEAR(px.x(), 1000.0, 1e-12);
  EXPECT_NEAR(px.y(), 400.0, 1e-12);
}

TEST(ProjectTarget, AxisMapsToCenterForEveryKind) {
  const Intrinsics intr{{321, 243}, 1.0, 300};
  const std::vector<TargetModel> models = {
      {ModelKind::BC, (VecX(2) << -0.1, 0.01).finished(), 1.0},
      {ModelKind::KB, (VecX(4) << 0.02, -0.003, 0.0004, -0.00005).finished(), 1.0},
      {ModelKind::UCM, VecX::Constant(1, 0.8), 1.0},
      {ModelKind::FOV, VecX::Constant(1, 0.9), 1.0},
      {ModelKind::EUCM, (VecX(2) << 0.6, 1.2).finished(), 1.0},
      {ModelKind::DS, (VecX(2) << -0.2, 0.55).finished(), 1.0},
      {ModelKind::DIV, (VecX(3) << -0.2, 0.01, -0.002).finished(), 2.0},
      {ModelKind::DIV_EVEN, (VecX(2) << -0.2, 0.01).finished(), 2.0},
  };
  for (const TargetModel& m : models) {
    const Vec2 px = project_target(m, intr, {0.0, 0.0, 3.0});
    EXPECT_NEAR(px.x(), 321.0, 1e-12) << kind_name(m.kind);
    EXPECT_NEAR(px.y(), 243.0, 1e-12) << kind_name(m.kind);
  }
}

TEST(RoundTrip, DivisionProjectBackProject) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const BackProjCamera cam = make_camera(
        {600 + 200 * uni(rng), 380 + 150 * uni(rng)}, 0.9 + 0.3 * uni(rng),
        300 + 300 * uni(rng), (VecX(2) << -0.35 * uni(rng), 0.02 * uni(rng)).finished(),
        1.8);
    for (int k = 0; k < 40; ++k) {
      const Vec3 X = testutil::random_in_fov_point(cam, rng);
      Vec2 px;
      if (cam.try_project(X, &px) != ProjStatus::Ok) continue;
      const Vec3 ray = cam.back_project(px);
      EXPECT_LT(angle_between(ray, X), 1e-9);
      // Pixel round trip through the equivalent target model.
      const Vec2 px2 = project_target(cam.as_target_model(), cam.intrinsics, X);
      EXPECT_LT((px2 - px).norm(), 1e-9);
    }
  }
}

TEST(RoundTrip, ForwardKindsInverted) {
  const Intrinsics intr{{640, 400}, 1.0, 420};
  const std::vector<TargetModel> models = {
      {ModelKind::BC, (VecX(2) << -0.08, 0.004).finished(), 1.0},
      {ModelKind::KB, (VecX(4) << -0.02, 0.001, 0.0, 0.0).finished(), 1.0},
      {ModelKind::UCM, VecX::Constant(1, 0.9), 1.0},
      {ModelKind::FOV, VecX::Constant(1, 1.1), 1.0},
      {ModelKind::EUCM, (VecX(2) << 0.55, 1.1).finished(), 1.0},
      {ModelKind::DS, (VecX(2) << -0.15, 0.5).finished(), 1.0},
  };
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (const TargetModel& m : models) {
    const ModelBackProjector inv(m, intr);
    for (int k = 0; k < 200; ++k) {
      const double w = 0.45 * std::abs(uni(rng)) * inv.max_angle();
      const double az = M_PI * uni(rng);
      const Vec3 X(std::sin(w) * std::cos(az), std::sin(w) * std::sin(az), std::cos(w));
      Vec2 px;
      if (try_project_target(m, intr, 3.0 * X, &px) != ProjStatus::Ok) continue;
      Vec3 ray;
      ASSERT_TRUE(inv.try_back_project(px, &ray)) << kind_name(m.kind);
      EXPECT_LT(angle_between(ray, X), 1e-9) << kind_name(m.kind) << " at w=" << w;
    }
  }
}

TEST(Properties, RadialSymmetry) {
  const BackProjCamera cam =
      make_camera({640, 400}, 1.3, 400, (VecX(2) << -0.2, 0.01).finished(), 1.9);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    const Vec3 X = testutil::random_in_fov_point(cam, rng);
    const double phi_rot = 2.0 * M_PI * uni(rng);
    const Mat3 Rz = rotation_from_axis_angle(Vec3(0, 0, phi_rot));
    Vec2 p1, p2;
    if (cam.try_project(X, &p1) != ProjStatus::Ok) continue;
    ASSERT_EQ(cam.try_project(Rz * X, &p2), ProjStatus::Ok);
    // In sensor coordinates the projected point rotates by exactly phi.
    const Vec2 m1 = cam.intrinsics.to_sensor(p1);
    const Vec2 m2 = cam.intrinsics.to_sensor(p2);
    const Vec2 m1_rot(std::cos(phi_rot) * m1.x() - std::sin(phi_rot) * m1.y(),
                      std::sin(phi_rot) * m1.x() + std::cos(phi_rot) * m1.y());
    EXPECT_LT((m2 - m1_rot).norm(), 1e-12);
  }
}

TEST(Properties, PhiMonotoneOverFov) {
  const std::vector<TargetModel> models = {
      {ModelKind::BC, (VecX(2) << -0.05, 0.002).finished(), 1.0},
      {ModelKind::KB, (VecX(4) << -0.01, 0.002, 0.0, 0.0).finished(), 1.0},
      {ModelKind::UCM, VecX::Constant(1, 0.7), 1.0},
      {ModelKind::FOV, VecX::Constant(1, 1.0), 1.0},
      {ModelKind::EUCM, (VecX(2) << 0.5, 1.3).finished(), 1.0},
      {ModelKind::DS, (VecX(2) << -0.1, 0.45).finished(), 1.0},
  };
  for (const TargetModel& m : models) {
    const double w_hi = m.kind == ModelKind::BC ? 0.9 : 1.3;
    double prev = -1.0;
    for (double w = 0.0; w <= w_hi; w += 0.01) {
      const double r = phi_or_nan(m, std::sin(w), std::cos(w));
      ASSERT_TRUE(std::isfinite(r)) << kind_name(m.kind);
      EXPECT_GT(r, prev) << kind_name(m.kind) << " at w=" << w;
      prev = r;
    }
  }
}
