#include "babelcalib/regress.hpp"

#include <gtest/gtest.h>

#include <random>

#include "babelcalib/synth.hpp"
#include "test_support.hpp"

using namespace babelcalib;

namespace {

BackProjCamera pinhole_cam(double r_max = 1.0) {
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 500};
  cam.profile = {VecX::Zero(2), r_max};
  return cam;
}

/// Division camera fitted to a forward model's profile: project the model's
/// profile into psi samples and least-squares fit the division coefficients.
/// Oracle-style generator for regress-recovery loops.
BackProjCamera division_fit_of(const TargetModel& m, double r_max, int degree = 2) {
  // For radius r on the retinal plane, ray angle w solves phi(sin w, cos w) = r;
  // psi(r) = r / tan(w).
  const Intrinsics intr{{0, 0}, 1.0, 1.0};
  const ModelBackProjector inv(m, intr);
  const int K = 220;
  std::vector<double> rs, psis;
  for (int k = 1; k < K; ++k) {
    const double r = r_max * k / (K - 1.0);
    Vec3 ray;
    if (!inv.try_back_project({r, 0.0}, &ray)) break;
    rs.push_back(r);
    psis.push_back(ray.z() / std::hypot(ray.x(), ray.y()) * r);
  }
  MatX A(rs.size(), degree);
  VecX b(rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    double pw = rs[i] * rs[i];
    for (int d = 0; d < degree; ++d) {
      A(i, d) = pw;
      pw *= rs[i] * rs[i];
    }
    b(i) = psis[i] - 1.0;
  }
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 500};
  cam.profile.coeffs = A.colPivHouseholderQr().solve(b);
  cam.profile.r_max = rs.back();
  return cam;
}

}  // namespace

TEST(SampleProfile, Endpoints) {
  const BackProjCamera cam = pinhole_cam(1.7);
  const std::vector<ProfileSample> two = sample_profile(cam, 2);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_DOUBLE_EQ(two[0].r, 0.0);
  EXPECT_DOUBLE_EQ(two[1].r, 1.7);
  for (const ProfileSample& s : sample_profile(cam, 50)) EXPECT_DOUBLE_EQ(s.Z, 1.0);
}

TEST(SampleProfile, SampleCountConvergence) {
  // For a smooth profile the regression result is grid-independent: K = 100
  // matches K = 1000 to 1e-10 when the family represents the profile.
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 450};
  cam.profile = {(VecX(2) << -0.28, 0.015).finished(), 1.5};
  const TargetModel a = regress_model(ModelKind::DIV, cam, 100);
  const TargetModel b = regress_model(ModelKind::DIV, cam, 1000);
  EXPECT_LT((a.params - b.params).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RegressModel, PinholeToKbIsTangentSeries) {
  const BackProjCamera cam = pinhole_cam(0.8);
  const TargetModel kb = regress_model(ModelKind::KB, cam, 200);
  double max_resid = 0.0;
  for (const ProfileSample& s : sample_profile(cam, 400))
    max_resid = std::max(max_resid, std::abs(phi(kb, s.R, s.Z) - s.r));
  EXPECT_LT(max_resid, 1e-6 * cam.profile.r_max);
  // Leading tan-series coefficients: tan w = w + w^3/3 + 2 w^5/15 + ...
  EXPECT_NEAR(kb.params[0], 1.0 / 3.0, 0.02);
}

TEST(RegressModel, UcmGenerateFitRecover) {
  const double gt_xi = 0.85;
  const TargetModel gen{ModelKind::UCM, VecX::Constant(1, gt_xi), 1.0};
  const BackProjCamera cam = division_fit_of(gen, 1.1);
  const TargetModel ucm = regress_model(ModelKind::UCM, cam, 100);
  EXPECT_NEAR(ucm.params[0], gt_xi, 1e-3);
}

TEST(RegressModel, DivEvenIdentity) {
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 450};
  cam.profile = {(VecX(2) << -0.31, 0.017).finished(), 1.4};
  const TargetModel m = regress_model(ModelKind::DIV_EVEN, cam, 100);
  EXPECT_EQ(m.kind, ModelKind::DIV_EVEN);
  EXPECT_EQ(m.params, cam.profile.coeffs);
}

TEST(RegressModel, SelfRecoveryForEveryKind) {
  // Fitting kind X to samples generated exactly by kind X recovers the
  // profile to < 1e-8 * r_max. Samples are taken directly from the
  // generator, so the only error source is the fit itself.
  const std::vector<TargetModel> gens = {
      {ModelKind::BC, (VecX(2) << -0.06, 0.004).finished(), 1.0},
      {ModelKind::KB, (VecX(4) << -0.04, 0.004, -0.0004, 0.0).finished(), 1.0},
      {ModelKind::UCM, VecX::Constant(1, 0.75), 1.0},
      {ModelKind::FOV, VecX::Constant(1, 0.95), 1.0},
      {ModelKind::EUCM, (VecX(2) << 0.55, 1.15).finished(), 1.0},
      {ModelKind::DS, (VecX(2) << -0.18, 0.5).finished(), 1.0},
  };
  for (const TargetModel& gen : gens) {
    std::vector<ProfileSample> samples;
    double r_max = 0.0;
    for (int k = 0; k < 150; ++k) {
      const double w = 0.75 * k / 149.0;
      const double r = phi(gen, std::sin(w), std::cos(w));
      samples.push_back({r, std::sin(w), std::cos(w)});
      r_max = std::max(r_max, r);
    }
    TargetModel rec;
    switch (gen.kind) {
      case ModelKind::BC: rec = babelcalib::detail::fit_bc(samples); break;
      case ModelKind::KB: rec = babelcalib::detail::fit_kb(samples); break;
      case ModelKind::UCM: rec = babelcalib::detail::fit_ucm(samples); break;
      case ModelKind::EUCM: rec = babelcalib::detail::fit_eucm(samples); break;
      case ModelKind::FOV: {
        std::vector<VecX> seeds;
        for (int i = 1; i <= 20; ++i)
          seeds.push_back(VecX::Constant(1, 0.01 + (M_PI - 0.02) * i / 20.0));
        rec = babelcalib::detail::fit_gridded(
            samples, [](const VecX& x) { return TargetModel{ModelKind::FOV, x, 1.0}; },
            seeds);
        break;
      }
      default: {
        std::vector<VecX> seeds;
        for (int i = 0; i < 20; ++i)
          for (int j = 0; j < 20; ++j)
            seeds.push_back(Eigen::Vector2d(-1.0 + 2.0 * i / 19.0, j / 19.0));
        rec = babelcalib::detail::fit_gridded(
            samples, [](const VecX& x) { return TargetModel{ModelKind::DS, x, 1.0}; },
            seeds);
        break;
      }
    }
    double max_dev = 0.0;
    for (const ProfileSample& s : samples)
      max_dev = std::max(max_dev, std::abs(phi(rec, s.R, s.Z) - s.r));
    EXPECT_LT(max_dev, 1e-8 * r_max) << kind_name(gen.kind);
  }
}

TEST(RegressModel, LinearKindsSatisfyNormalEquations) {
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 420};
  cam.profile = {(VecX(2) << -0.22, 0.012).finished(), 1.3};
  // KB: residual of the linear system must be orthogonal to the columns.
  const TargetModel kb = regress_model(ModelKind::KB, cam, 100);
  const std::vector<ProfileSample> samples = sample_profile(cam, 100);
  MatX A(samples.size(), 4);
  VecX b(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double z = std::atan2(samples[i].R, samples[i].Z), z2 = z * z;
    A(i, 0) = z * z2;
    A(i, 1) = A(i, 0) * z2;
    A(i, 2) = A(i, 1) * z2;
    A(i, 3) = A(i, 2) * z2;
    b(i) = samples[i].r - z;
  }
  const VecX resid = A * kb.params - b;
  EXPECT_LT((A.transpose() * resid).norm() / b.norm(), 1e-10);
}

TEST(RegressModel, GridSeedMonotonicity) {
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 430};
  cam.profile = {(VecX(2) << -0.2, 0.01).finished(), 1.2};
  const std::vector<ProfileSample> samples = sample_profile(cam, 100);
  const TargetModel fov = regress_model(ModelKind::FOV, cam, 100);
  const double J_fit = profile_objective(fov, samples);
  for (int i = 1; i <= 20; ++i) {
    const TargetModel seed{ModelKind::FOV,
                           VecX::Constant(1, 0.01 + (M_PI - 0.02) * i / 20.0), 1.2};
    EXPECT_LE(J_fit, profile_objective(seed, samples) + 1e-12);
  }
}

TEST(RegressModel, EucmInvalidAlphaRaises) {
  // A catadioptric-grade profile pushes EUCM's alpha above 1.
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 380};
  cam.profile = {(VecX(2) << -0.52, 0.035).finished(), 2.05};
  try {
    const TargetModel m = regress_model(ModelKind::EUCM, cam, 100);
    EXPECT_TRUE(m.params_valid());  // acceptable: profile representable after all
  } catch (const CalibError& e) {
    EXPECT_TRUE(e.code() == Err::InvalidParams || e.code() == Err::RegressionDiverged);
  }
}

TEST(KbFromRays, RecoversTrueKbCamera) {
  const TargetModel gt_kb{ModelKind::KB,
                          (VecX(4) << -0.03, 0.002, -0.0002, 0.0).finished(), 1.0};
  const Intrinsics intr{{640, 400}, 1.0, 420};
  // The division fit of this camera is near-exact over the range; rays from
  // the fitted division camera then drive the linear KB solve.
  BackProjCamera cam = division_fit_of(gt_kb, 1.0, 5);
  cam.intrinsics = intr;

  std::vector<Correspondence> corrs;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int i = 0; i < 60; ++i) {
    const double r = 0.9 * cam.profile.r_max * std::abs(uni(rng));
    const double az = M_PI * uni(rng);
    const Vec2 m(r * std::cos(az), r * std::sin(az));
    corrs.push_back({0, 0, i, intr.to_pixel(m), Vec2::Zero()});
  }
  const TargetModel kb = kb_from_rays(corrs, cam);
  double max_dev = 0.0;
  for (double w = 0.02; w < 0.7; w += 0.02)
    max_dev = std::max(max_dev, std::abs(phi(kb, std::sin(w), std::cos(w)) -
                                         phi(gt_kb, std::sin(w), std::cos(w))));
  EXPECT_LT(max_dev, 1e-5);
}

TEST(KbFromRays, NarrowAngleRangeIllConditioned) {
  BackProjCamera cam;
  cam.intrinsics = {{640, 400}, 1.0, 420};
  cam.profile = {VecX::Zero(2), 1.0};
  std::vector<Correspondence> corrs;
  for (int i = 0; i < 20; ++i) {
    const double az = 2.0 * M_PI * i / 20.0;
    const Vec2 m(0.3 * std::cos(az), 0.3 * std::sin(az));  // identical omega
    corrs.push_back({0, 0, i, cam.intrinsics.to_pixel(m), Vec2::Zero()});
  }
  EXPECT_THROW(kb_from_rays(corrs, cam), CalibError);
}
