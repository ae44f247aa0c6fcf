#include "babelcalib/synth.hpp"

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace babelcalib;

TEST(Generate, NoiseFreeLossIsZeroAtGroundTruth) {
  SceneSpec spec = preset_scene("wide");
  spec.rng_seed = 1;
  const auto [ds, gt] = generate(spec);
  EXPECT_NEAR(robust_loss(gt.calib, ds, 2.0).loss, 0.0, 1e-14);
}

TEST(Generate, NoiseStdMatchesSigma) {
  SceneSpec spec = preset_scene("wide");
  spec.noise_sigma = 1.0;
  spec.n_images = 150;  // >= 1e4 corners
  spec.rng_seed = 2;
  const auto [ds, gt] = generate(spec);
  ASSERT_GE(ds.correspondences.size(), 10000u);
  const std::vector<ResidualRecord> recs = residual_records(gt.calib, ds, 1e9);
  double sq = 0.0;
  std::int64_t n = 0;
  for (const ResidualRecord& r : recs) {
    sq += r.distance * r.distance;
    n += 2;  // two coordinates per corner
  }
  const double std_per_axis = std::sqrt(sq / static_cast<double>(n));
  EXPECT_NEAR(std_per_axis, 1.0, 0.05);
}

TEST(Generate, DeterministicPerSeed) {
  SceneSpec spec = preset_scene("fisheye");
  spec.noise_sigma = 0.7;
  spec.outlier_fraction = 0.1;
  spec.rng_seed = 3;
  const auto [a, gta] = generate(spec);
  const auto [b, gtb] = generate(spec);
  ASSERT_EQ(a.correspondences.size(), b.correspondences.size());
  for (std::size_t i = 0; i < a.correspondences.size(); ++i)
    EXPECT_EQ(a.correspondences[i].u, b.correspondences[i].u);
}

TEST(Generate, EpipolarConstraintHoldsBeforeNoise) {
  SceneSpec spec = preset_scene("fisheye");
  spec.rng_seed = 4;
  const auto [ds, gt] = generate(spec);
  for (const auto& [img, cam_pose] : gt.calib.camera_poses) {
    for (const auto& [bid, board_pose] : gt.calib.board_poses) {
      const Pose pose = compose_pose(cam_pose, board_pose);
      Mat3 F = testutil::gt_radial_F(gt.calib.intrinsics.e, gt.calib.intrinsics.a, pose);
      F /= F.norm();
      for (const Correspondence& c : ds.corrs(img, bid)) {
        const double resid =
            Vec3(c.u.x(), c.u.y(), 1.0).dot(F * Vec3(c.X.x(), c.X.y(), 1.0));
        EXPECT_LT(std::abs(resid), 1e-9);
      }
    }
  }
}

TEST(Generate, CheiralityAllDepthsPositive) {
  SceneSpec spec = preset_scene("catadioptric");
  spec.rng_seed = 5;
  const auto [ds, gt] = generate(spec);
  for (const Correspondence& c : ds.correspondences) {
    const Pose pose = compose_pose(gt.calib.camera_poses.at(c.image_id),
                                   gt.calib.board_poses.at(c.board_id));
    EXPECT_GT((pose * Vec3(c.X.x(), c.X.y(), 0.0)).z(), 0.0);
  }
}

TEST(Generate, OutlierLabelsAreExactFraction) {
  SceneSpec spec = preset_scene("wide");
  spec.outlier_fraction = 0.1;
  spec.rng_seed = 6;
  const auto [ds, gt] = generate(spec);
  std::int64_t n_out = 0;
  for (char f : gt.outlier) n_out += f;
  const double frac = static_cast<double>(n_out) / gt.outlier.size();
  EXPECT_NEAR(frac, 0.1, 0.01);
}

TEST(Presets, CoverDfovRange) {
  const double pin = profile_dfov_deg(
      {preset_scene("pinhole").gt_intrinsics,
       {preset_scene("pinhole").gt_model.params,
        max_retinal_radius(preset_scene("pinhole").gt_intrinsics, 1280, 800)}});
  const double cat = profile_dfov_deg(
      {preset_scene("catadioptric").gt_intrinsics,
       {preset_scene("catadioptric").gt_model.params,
        max_retinal_radius(preset_scene("catadioptric").gt_intrinsics, 1280, 800)}});
  EXPECT_NEAR(pin, 90.0, 10.0);
  EXPECT_GT(cat, 180.0);
}

TEST(CorrectionStudy, ZeroNoiseBothVariantsExact) {
  CorrectionStudyConfig cfg;
  cfg.sigmas = {0.0};
  cfg.trials = 20;
  cfg.seed = 7;
  const std::vector<CorrectionStudyResult> res = corner_correction_study(cfg);
  for (const CorrectionStudyResult& r : res) {
    ASSERT_EQ(r.rows.size(), 1u);
    EXPECT_EQ(r.rows[0].failures_original, 0);
    EXPECT_EQ(r.rows[0].failures_corrected, 0);
    EXPECT_LT(r.rows[0].median_original.grid_rms, 1e-6);
    EXPECT_LT(r.rows[0].median_corrected.grid_rms, 1e-6);
    EXPECT_LT(std::abs(r.rows[0].median_original.rotation_err -
                       r.rows[0].median_corrected.rotation_err),
              1e-9);
  }
}

TEST(CorrectionStudy, SmokeAtModerateNoise) {
  CorrectionStudyConfig cfg;
  cfg.sigmas = {0.5, 1.0};
  cfg.trials = 60;
  cfg.seed = 8;
  const std::vector<CorrectionStudyResult> res = corner_correction_study(cfg);
  ASSERT_EQ(res.size(), 2u);
  for (const CorrectionStudyResult& r : res) {
    ASSERT_EQ(r.rows.size(), 2u);
    for (const CorrectionStudyRow& row : r.rows) {
      EXPECT_LT(row.failures_original, cfg.trials / 4);
      EXPECT_LT(row.failures_corrected, cfg.trials / 4);
      EXPECT_TRUE(std::isfinite(row.median_original.center_err));
      EXPECT_TRUE(std::isfinite(row.median_corrected.center_err));
    }
  }
}

TEST(DegreeStudy, SchemaAndSanity) {
  DegreeStudyConfig cfg;
  cfg.presets = {"wide"};
  cfg.degrees = {2, 4};
  cfg.n_images = 5;
  cfg.iterations = 30;
  cfg.seed = 9;
  const std::vector<DegreeStudyRow> rows = degree_selection_study(cfg);
  ASSERT_EQ(rows.size(), 2u);
  for (const DegreeStudyRow& r : rows) {
    EXPECT_FALSE(r.failed);
    EXPECT_GT(r.refined_inlier_pct, 90.0);
    EXPECT_LT(r.refined_rms, 2.0);
  }
}
