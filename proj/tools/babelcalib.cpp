// Command-line driver: calibrate, evaluate, convert, synth, study.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>

#include "babelcalib/calib.hpp"
#include "babelcalib/io.hpp"
#include "babelcalib/models.hpp"
#include "babelcalib/synth.hpp"

namespace fs = std::filesystem;
using namespace babelcalib;

namespace {

std::vector<double> non_square_aspect_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 15; ++i) grid.push_back(0.5 + 0.1 * i);
  return grid;
}

ModelKind parse_model(const std::string& name) {
  const auto kind = kind_from_name(name);
  if (!kind)
    raise(Err::InputError,
          "unknown model '" + name + "' (expected bc|kb|ucm|fov|eucm|ds|div|div-even)");
  return *kind;
}

std::string stem_path(const std::string& out_path, const char* suffix) {
  fs::path p(out_path);
  p.replace_extension();
  return p.string() + suffix;
}

int cmd_calibrate(const std::string& detections, const std::string& boards,
                  const std::string& model, const std::string& out,
                  const std::string& config_path, bool non_square, std::uint64_t seed) {
  const ModelKind kind = parse_model(model);
  const Dataset ds = load_dataset(boards, detections);
  if (ds.correspondences.empty()) raise(Err::InputError, "no detections in input");

  RansacConfig cfg;
  if (!config_path.empty()) cfg = config_from_json(detail::parse_file(config_path));
  cfg.rng_seed = seed;
  if (non_square) cfg.aspect_samples = non_square_aspect_grid();

  const CalibrationResult result = calibrate(ds, kind, cfg);

  CalibrationReport rep;
  rep.calib = result.calib;
  rep.score = result.score;
  rep.config = cfg;
  rep.rng_seed = seed;
  detail::write_file(out, report_to_json(rep).dump(2) + "\n");
  detail::write_file(stem_path(out, "_residuals.csv"), residuals_csv(result.residuals));
  detail::write_file(stem_path(out, "_residuals.svg"),
                     svg_residual_scatter(result.residuals, cfg.huber_scale));

  std::cout << "model " << kind_name(kind) << ": rms_weighted=" << result.score.rms_weighted
            << " px, inlier_ratio=" << result.score.inlier_ratio
            << ", loss=" << result.score.loss << "\n"
            << "report: " << out << "\n";
  return 0;
}

int cmd_evaluate(const std::string& calib_path, const std::string& detections,
                 const std::string& boards, const std::string& out) {
  const CalibrationReport rep = report_from_json(detail::parse_file(calib_path));
  const Dataset ds = load_dataset(boards, detections);
  if (ds.correspondences.empty()) raise(Err::InputError, "no detections in test input");

  const HoldoutResult res = evaluate_holdout(rep.calib, ds, rep.config);
  detail::write_file(out, evaluation_to_json(res).dump(2) + "\n");
  std::cout << "evaluate: rms_weighted=" << res.score.rms_weighted
            << " px, inlier_ratio=" << res.score.inlier_ratio << ", failures "
            << res.failed_images.size() << "\n";
  return 0;
}

int cmd_convert(const std::string& calib_path, const std::string& model,
                const std::string& out, double radius_scale) {
  const ModelKind kind = parse_model(model);
  CalibrationReport rep = report_from_json(detail::parse_file(calib_path));
  if (rep.calib.back_projection.coeffs.size() == 0)
    raise(Err::InputError, "calibration report lacks the division back-projection block");

  BackProjCamera cam{rep.calib.intrinsics, rep.calib.back_projection};
  rep.calib.model = regress_model(kind, cam, 100, radius_scale);

  const std::vector<ProfileSample> samples = sample_profile(cam, 100, radius_scale);
  double max_dev = 0.0;
  for (const ProfileSample& s : samples) {
    const double r = phi_or_nan(rep.calib.model, s.R, s.Z);
    if (std::isfinite(r)) max_dev = std::max(max_dev, std::abs(r - s.r));
  }
  const double rms =
      std::sqrt(profile_objective(rep.calib.model, samples) / samples.size());

  json j = report_to_json(rep);
  j["conversion"] = {{"profile_rms", rms}, {"profile_max_deviation", max_dev}};
  detail::write_file(out, j.dump(2) + "\n");
  std::cout << "converted to " << kind_name(kind) << ": profile rms " << rms
            << " (normalized units), max deviation " << max_dev << "\n";
  return 0;
}

int cmd_synth(const std::string& preset, int n_images, double noise, double outliers,
              std::uint64_t seed, const std::string& out_dir) {
  if (n_images < 1) raise(Err::InputError, "--images must be at least 1");
  SceneSpec spec = preset_scene(preset);
  spec.n_images = n_images;
  spec.noise_sigma = noise;
  spec.outlier_fraction = outliers;
  spec.rng_seed = seed;
  const auto [ds, gt] = generate(spec);

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  detail::write_file((dir / "boards.json").string(), boards_to_json(ds.boards).dump(2) + "\n");

  const int n_train = std::max(1, static_cast<int>(std::lround(0.8 * n_images)));
  Dataset train, test;
  train.boards = test.boards = ds.boards;
  train.image_size = test.image_size = ds.image_size;
  for (const Correspondence& c : ds.correspondences)
    (c.image_id < n_train ? train : test).correspondences.push_back(c);
  train.normalize();
  test.normalize();
  detail::write_file((dir / "train.json").string(), detections_to_json(train).dump(2) + "\n");
  detail::write_file((dir / "test.json").string(), detections_to_json(test).dump(2) + "\n");

  CalibrationReport rep;
  rep.calib = gt.calib;
  rep.config.rng_seed = seed;
  rep.rng_seed = seed;
  rep.score = robust_loss(gt.calib, ds, rep.config.huber_scale);
  detail::write_file((dir / "gt.json").string(), report_to_json(rep).dump(2) + "\n");

  std::cout << "preset " << preset << ": " << n_train << " train / " << n_images - n_train
            << " test images, " << ds.correspondences.size() << " correspondences, DFOV "
            << profile_dfov_deg({gt.calib.intrinsics, gt.calib.back_projection}) << " deg\n";
  return 0;
}

int cmd_study(const std::string& which, const std::string& out_dir, std::uint64_t seed,
              int trials, int images) {
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  if (which == "corner-correction") {
    CorrectionStudyConfig cfg;
    cfg.seed = seed;
    cfg.trials = trials;
    const std::vector<CorrectionStudyResult> results = corner_correction_study(cfg);
    detail::write_file((dir / "corner_correction.csv").string(),
                       correction_study_csv(results));
    for (const CorrectionStudyResult& res : results)
      detail::write_file((dir / ("corner_correction_" + res.profile + ".svg")).string(),
                         svg_correction_chart(res));
    for (const CorrectionStudyResult& res : results) {
      const CorrectionReduction red = correction_reduction(res);
      std::cout << res.profile << ": corrected/original medians - rotation " << red.rotation
                << ", translation " << red.translation << ", rms " << red.rms << "\n";
    }
  } else if (which == "degree-selection") {
    DegreeStudyConfig cfg;
    cfg.seed = seed;
    if (images > 0) cfg.n_images = images;
    const std::vector<DegreeStudyRow> rows = degree_selection_study(cfg);
    detail::write_file((dir / "degree_selection.csv").string(), degree_study_csv(rows));
    detail::write_file((dir / "degree_selection.svg").string(), svg_degree_chart(rows));
    for (const DegreeStudyRow& r : rows)
      std::cout << r.preset << " degree " << r.degree << ": initial " << r.initial_rms
                << " px / " << r.initial_inlier_pct << "%, refined " << r.refined_rms
                << " px / " << r.refined_inlier_pct << "%\n";
  } else {
    raise(Err::InputError, "unknown study '" + which + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal central-camera calibration from planar-target correspondences"};
  app.require_subcommand(1);

  std::string detections, boards, model, out, config_path, calib_path, preset, which;
  std::string out_dir;
  bool non_square = false;
  std::uint64_t seed = 0;
  int n_images = 10, trials = 1000, study_images = 0;
  double noise = 0.0, outliers = 0.0, radius_scale = 1.0;

  CLI::App* c = app.add_subcommand("calibrate", "Calibrate from detections");
  c->add_option("--detections", detections)->required();
  c->add_option("--boards", boards)->required();
  c->add_option("--model", model)->required();
  c->add_option("--out", out)->required();
  c->add_option("--config", config_path);
  c->add_flag("--non-square", non_square, "sample pixel aspect ratios over [0.5, 2]");
  c->add_option("--seed", seed);

  CLI::App* e = app.add_subcommand("evaluate", "Hold-out pose evaluation, intrinsics fixed");
  e->add_option("--calib", calib_path)->required();
  e->add_option("--detections", detections)->required();
  e->add_option("--boards", boards)->required();
  e->add_option("--out", out)->required();

  CLI::App* v = app.add_subcommand("convert", "Regress a calibration onto another model");
  v->add_option("--calib", calib_path)->required();
  v->add_option("--model", model)->required();
  v->add_option("--out", out)->required();
  v->add_option("--max-radius-scale", radius_scale);

  CLI::App* s = app.add_subcommand("synth", "Generate a synthetic capture");
  s->add_option("--preset", preset)->required();
  s->add_option("--images", n_images);
  s->add_option("--noise", noise);
  s->add_option("--outliers", outliers);
  s->add_option("--seed", seed);
  s->add_option("--out", out_dir)->required();

  CLI::App* t = app.add_subcommand("study", "Run a built-in experiment");
  t->add_option("--which", which)->required();
  t->add_option("--out", out_dir)->required();
  t->add_option("--seed", seed);
  t->add_option("--trials", trials);
  t->add_option("--images", study_images);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(c))
      return cmd_calibrate(detections, boards, model, out, config_path, non_square, seed);
    if (app.got_subcommand(e)) return cmd_evaluate(calib_path, detections, boards, out);
    if (app.got_subcommand(v)) return cmd_convert(calib_path, model, out, radius_scale);
    if (app.got_subcommand(s))
      return cmd_synth(preset, n_images, noise, outliers, seed, out_dir);
    if (app.got_subcommand(t)) return cmd_study(which, out_dir, seed, trials, study_images);
  } catch (const CalibError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return is_input_error(err.code()) ? 1 : 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
