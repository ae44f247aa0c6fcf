#include "babelcalib/io.hpp"

#include <gtest/gtest.h>

#include "babelcalib/synth.hpp"
#include "test_support.hpp"

using namespace babelcalib;

namespace {

CalibrationReport make_report() {
  SceneSpec spec = preset_scene("wide");
  spec.noise_sigma = 0.4;
  spec.rng_seed = 1;
  const auto [ds, gt] = generate(spec);
  CalibrationReport rep;
  rep.calib = gt.calib;
  rep.config.rng_seed = 5;
  rep.rng_seed = 5;
  rep.score = robust_loss(gt.calib, ds, rep.config.huber_scale);
  return rep;
}

}  // namespace

TEST(BoardsIo, RoundTrip) {
  SceneSpec spec = preset_scene("pinhole");
  spec.n_boards = 2;
  const auto [ds, gt] = generate(spec);
  const json j = boards_to_json(ds.boards);
  const std::vector<Board> parsed = boards_from_json(j);
  ASSERT_EQ(parsed.size(), ds.boards.size());
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    EXPECT_EQ(parsed[i].id, ds.boards[i].id);
    ASSERT_EQ(parsed[i].fiducials.size(), ds.boards[i].fiducials.size());
    for (std::size_t k = 0; k < parsed[i].fiducials.size(); ++k)
      EXPECT_EQ(parsed[i].fiducials[k].xy, ds.boards[i].fiducials[k].xy);
  }
}

TEST(DetectionsIo, RoundTrip) {
  SceneSpec spec = preset_scene("wide");
  spec.noise_sigma = 0.3;
  spec.rng_seed = 2;
  const auto [ds, gt] = generate(spec);
  const Dataset parsed = dataset_from_json(detections_to_json(ds), ds.boards);
  ASSERT_EQ(parsed.correspondences.size(), ds.correspondences.size());
  for (std::size_t i = 0; i < parsed.correspondences.size(); ++i) {
    EXPECT_EQ(parsed.correspondences[i].u, ds.correspondences[i].u);
    EXPECT_EQ(parsed.correspondences[i].X, ds.correspondences[i].X);
  }
  ASSERT_TRUE(parsed.image_size.has_value());
  EXPECT_EQ(*parsed.image_size, *ds.image_size);
}

TEST(ReportIo, RoundTripExact) {
  const CalibrationReport rep = make_report();
  const json j = report_to_json(rep);
  const CalibrationReport parsed = report_from_json(j);
  EXPECT_EQ(parsed.calib.intrinsics.f, rep.calib.intrinsics.f);
  EXPECT_EQ(parsed.calib.intrinsics.e, rep.calib.intrinsics.e);
  EXPECT_EQ(parsed.calib.model.params, rep.calib.model.params);
  EXPECT_EQ(parsed.score.loss, rep.score.loss);
  ASSERT_EQ(parsed.calib.camera_poses.size(), rep.calib.camera_poses.size());
  for (const auto& [id, pose] : rep.calib.camera_poses) {
    const Pose& q = parsed.calib.camera_poses.at(id);
    EXPECT_LT(rotation_angle(q.R, pose.R), 1e-12);
    EXPECT_EQ(q.t, pose.t);
  }
  // Serialization is deterministic.
  EXPECT_EQ(j.dump(2), report_to_json(parsed).dump(2));
}

TEST(ReportIo, ScoreRecomputableFromStoredParameters) {
  SceneSpec spec = preset_scene("fisheye");
  spec.noise_sigma = 0.4;
  spec.rng_seed = 3;
  const auto [ds, gt] = generate(spec);
  CalibrationReport rep;
  rep.calib = gt.calib;
  rep.score = robust_loss(gt.calib, ds, rep.config.huber_scale);

  const CalibrationReport parsed = report_from_json(report_to_json(rep));
  const Score recomputed = robust_loss(parsed.calib, ds, parsed.config.huber_scale);
  EXPECT_NEAR(recomputed.loss, rep.score.loss, 1e-9 * std::max(1.0, rep.score.loss));
}

TEST(StrictSchema, UnknownFieldRejectedWithPath) {
  json j = boards_to_json({Board{0, {{0, {0, 0}}, {1, {1, 0}}, {2, {0, 1}}, {3, {1, 1}}}}});
  j["boards"][0]["color"] = "red";
  try {
    boards_from_json(j);
    FAIL() << "expected rejection";
  } catch (const CalibError& e) {
    EXPECT_EQ(e.code(), Err::InputError);
    EXPECT_NE(std::string(e.what()).find("$.boards[0]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("color"), std::string::npos);
  }
}

TEST(StrictSchema, UnknownDetectionFieldRejected) {
  const json jb = boards_to_json({Board{0, {{0, {0, 0}}, {1, {1, 0}}, {2, {0, 1}}, {3, {1, 1}}}}});
  json jd;
  jd["detections"] = json::array();
  jd["detections"].push_back({{"image_id", 0},
                              {"board_id", 0},
                              {"fiducial_id", 1},
                              {"u", 10.0},
                              {"v", 20.0},
                              {"confidence", 0.9}});
  EXPECT_THROW(dataset_from_json(jd, boards_from_json(jb)), CalibError);
}

TEST(Validation, UnknownBoardIdNamed) {
  const json jb = boards_to_json({Board{3, {{0, {0, 0}}, {1, {1, 0}}, {2, {0, 1}}, {3, {1, 1}}}}});
  json jd;
  jd["detections"] = json::array();
  jd["detections"].push_back(
      {{"image_id", 0}, {"board_id", 9}, {"fiducial_id", 0}, {"u", 1.0}, {"v", 2.0}});
  try {
    dataset_from_json(jd, boards_from_json(jb));
    FAIL() << "expected rejection";
  } catch (const CalibError& e) {
    EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
  }
}

TEST(Csv, ResidualsShapeAndDeterminism) {
  SceneSpec spec = preset_scene("wide");
  spec.noise_sigma = 0.5;
  spec.rng_seed = 4;
  const auto [ds, gt] = generate(spec);
  const std::vector<ResidualRecord> recs = residual_records(gt.calib, ds, 2.0);
  const std::string csv = residuals_csv(recs);
  EXPECT_EQ(csv, residuals_csv(recs));
  std::size_t lines = std::count(csv.begin(), csv.end(), '\n');
  EXPECT_EQ(lines, recs.size() + 1);  // header + rows
}

TEST(Svg, ScatterContainsPointsAndThresholdRing) {
  SceneSpec spec = preset_scene("wide");
  spec.noise_sigma = 0.5;
  spec.rng_seed = 5;
  const auto [ds, gt] = generate(spec);
  const std::string svg =
      svg_residual_scatter(residual_records(gt.calib, ds, 2.0), 2.0);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("stroke-dasharray"), std::string::npos);
  EXPECT_GT(std::count(svg.begin(), svg.end(), '\n'), 100);
}

TEST(ConfigIo, RoundTripAndValidation) {
  RansacConfig cfg;
  cfg.iterations = 123;
  cfg.huber_scale = 1.5;
  cfg.aspect_samples = {0.9, 1.0, 1.1};
  const RansacConfig parsed = config_from_json(config_to_json(cfg));
  EXPECT_EQ(parsed.iterations, 123);
  EXPECT_EQ(parsed.huber_scale, 1.5);
  EXPECT_EQ(parsed.aspect_samples, cfg.aspect_samples);

  json bad = config_to_json(cfg);
  bad["sample_size"] = 5;  // below the minimum of 8
  EXPECT_THROW(config_from_json(bad), CalibError);
}
