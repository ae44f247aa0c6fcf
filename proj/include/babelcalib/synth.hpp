#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "babelcalib/calib.hpp"
#include "babelcalib/dataset.hpp"
#include "babelcalib/models.hpp"
#include "babelcalib/parallel.hpp"
#include "babelcalib/types.hpp"

namespace babelcalib {

/// Specification of a synthetic calibration capture.
struct SceneSpec {
  Vec2 image_size{1280, 800};
  TargetModel gt_model{ModelKind::DIV_EVEN, VecX::Zero(2), 1.0};
  Intrinsics gt_intrinsics{{640, 400}, 1.0, 700.0};
  int board_rows = 7;
  int board_cols = 10;
  double board_spacing = 1.0;
  int n_boards = 1;
  int n_images = 10;
  double min_distance = 2.0;  // board widths
  double max_distance = 6.0;
  double max_tilt_deg = 50.0;
  double noise_sigma = 0.0;
  double outlier_fraction = 0.0;
  std::uint64_t rng_seed = 0;
};

struct GroundTruth {
  Calibration calib;
  std::vector<char> outlier;  // aligned with the dataset correspondences
};

namespace detail {

inline Board make_grid_board(int id, int rows, int cols, double spacing) {
  Board b;
  b.id = id;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      b.fiducials.push_back({r * cols + c, Vec2(c * spacing, r * spacing)});
  return b;
}

/// Camera pose looking at `target` from distance d, tilt t, azimuth az,
/// roll. World -> camera.
inline Pose look_at_pose(const Vec3& target, double distance, double tilt, double azimuth,
                         double roll, const Vec2& jitter) {
  const Vec3 dir(std::sin(tilt) * std::cos(azimuth), std::sin(tilt) * std::sin(azimuth),
                 std::cos(tilt));
  const Vec3 C = target + distance * dir;
  const Vec3 aim = target + Vec3(jitter.x(), jitter.y(), 0.0);
  const Vec3 z = (aim - C).normalized();
  const Vec3 up(std::cos(roll), std::sin(roll), 0.0);
  Vec3 x = up.cross(z);
  if (x.norm() < 1e-8) x = Vec3(0, 1, 0).cross(z);
  x.normalize();
  const Vec3 y = z.cross(x);
  Pose pose;
  pose.R.row(0) = x;
  pose.R.row(1) = y;
  pose.R.row(2) = z;
  pose.t = -(pose.R * C);
  return pose;
}

}  // namespace detail

/// Generate a synthetic capture: sampled poses, ground-truth projection,
/// Gaussian pixel noise and uniform outlier replacement. Deterministic per
/// seed; correspondences are emitted in normalized (sorted) order.
inline std::pair<Dataset, GroundTruth> generate(const SceneSpec& spec) {
  Dataset ds;
  GroundTruth gt;
  ds.image_size = spec.image_size;

  TargetModel model = spec.gt_model;
  model.r_max =
      max_retinal_radius(spec.gt_intrinsics, spec.image_size.x(), spec.image_size.y());
  gt.calib.model = model;
  gt.calib.intrinsics = spec.gt_intrinsics;
  if (model.kind == ModelKind::DIV_EVEN) {
    gt.calib.back_projection = {model.params, model.r_max};
  } else {
    gt.calib.back_projection = {VecX::Zero(2), model.r_max};
  }
  gt.calib.reference_board = 0;

  const double W = (spec.board_cols - 1) * spec.board_spacing;
  const double H = (spec.board_rows - 1) * spec.board_spacing;
  for (int b = 0; b < spec.n_boards; ++b) {
    ds.boards.push_back(detail::make_grid_board(b, spec.board_rows, spec.board_cols,
                                                spec.board_spacing));
    Pose bp;
    if (b > 0) {
      // Side-by-side boards with a slight relative tilt.
      bp.R = rotation_from_axis_angle(Vec3(0.0, 0.25 * b, 0.0));
      bp.t = Vec3((W + 2.0 * spec.board_spacing) * b, 0.0, 0.0);
    }
    gt.calib.board_poses[b] = bp;
  }

  Vec3 scene_center = Vec3::Zero();
  for (const auto& [id, bp] : gt.calib.board_poses)
    scene_center += bp * Vec3(W / 2.0, H / 2.0, 0.0);
  scene_center /= static_cast<double>(spec.n_boards);

  const double margin = 2.0;
  for (int img = 0; img < spec.n_images; ++img) {
    std::mt19937_64 rng = make_rng(spec.rng_seed, static_cast<std::uint64_t>(img));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int aimed_board = img % spec.n_boards;

    Pose cam;
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const double dist = (spec.min_distance +
                           (spec.max_distance - spec.min_distance) * uni(rng)) * W;
      const double tilt = spec.max_tilt_deg * M_PI / 180.0 * uni(rng);
      const double azimuth = 2.0 * M_PI * uni(rng);
      const double roll = 2.0 * M_PI * uni(rng);
      const Vec2 jitter((uni(rng) - 0.5) * 0.2 * W, (uni(rng) - 0.5) * 0.2 * H);
      const Vec3 aim = gt.calib.board_poses.at(aimed_board) * Vec3(W / 2.0, H / 2.0, 0.0);
      cam = detail::look_at_pose(aim, dist, tilt, azimuth, roll, jitter);

      bool ok = true;
      for (const auto& [bid, bpose] : gt.calib.board_poses) {
        const Pose composed = compose_pose(cam, bpose);
        for (const Fiducial& f : ds.boards[bid].fiducials) {
          const Vec3 Xc = composed * Vec3(f.xy.x(), f.xy.y(), 0.0);
          if (Xc.z() <= 0.0) {
            ok = false;
            break;
          }
          Vec2 px;
          const bool proj = try_project_target(model, spec.gt_intrinsics, Xc, &px) ==
                            ProjStatus::Ok;
          const bool inside = proj && px.x() >= margin && px.y() >= margin &&
                              px.x() <= spec.image_size.x() - margin &&
                              px.y() <= spec.image_size.y() - margin;
          if (bid == aimed_board && !inside) {
            ok = false;
            break;
          }
        }
        if (!ok) break;
      }
      placed = ok;
    }
    if (!placed)
      raise(Err::UnreachablePose, "could not sample a pose with the full board visible");
    gt.calib.camera_poses[img] = cam;

    // Project, then corrupt.
    std::vector<Correspondence> img_corrs;
    for (const auto& [bid, bpose] : gt.calib.board_poses) {
      const Pose composed = compose_pose(cam, bpose);
      for (const Fiducial& f : ds.boards[bid].fiducials) {
        const Vec3 Xc = composed * Vec3(f.xy.x(), f.xy.y(), 0.0);
        Vec2 px;
        if (try_project_target(model, spec.gt_intrinsics, Xc, &px) != ProjStatus::Ok)
          continue;
        if (px.x() < margin || px.y() < margin || px.x() > spec.image_size.x() - margin ||
            px.y() > spec.image_size.y() - margin)
          continue;
        img_corrs.push_back({img, bid, f.id, px, f.xy});
      }
    }
    std::normal_distribution<double> gauss(0.0, spec.noise_sigma);
    if (spec.noise_sigma > 0.0)
      for (Correspondence& c : img_corrs) c.u += Vec2(gauss(rng), gauss(rng));

    std::vector<char> img_outlier(img_corrs.size(), 0);
    const int n_out = static_cast<int>(
        std::lround(spec.outlier_fraction * static_cast<double>(img_corrs.size())));
    if (n_out > 0) {
      std::vector<std::size_t> idx(img_corrs.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      for (int i = 0; i < n_out; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
        Correspondence& c = img_corrs[idx[i]];
        c.u = Vec2(margin + uni(rng) * (spec.image_size.x() - 2 * margin),
                   margin + uni(rng) * (spec.image_size.y() - 2 * margin));
        img_outlier[idx[i]] = 1;
      }
    }
    for (std::size_t i = 0; i < img_corrs.size(); ++i) {
      ds.correspondences.push_back(img_corrs[i]);
      gt.outlier.push_back(img_outlier[i]);
    }
  }
  ds.normalize();
  return {std::move(ds), std::move(gt)};
}

/// The four synthetic lens presets, spanning ~90 degree to >180 degree DFOV.
inline SceneSpec preset_scene(const std::string& name) {
  SceneSpec s;
  s.image_size = {1280, 800};
  if (name == "pinhole") {
    // Near-pinhole: with an exactly zero profile the center of projection
    // drops out of the radial constraint (3-D null space), so the preset
    // carries the faint distortion every real lens has.
    s.gt_intrinsics = {{652, 410}, 1.0, 760.0};
    s.gt_model = {ModelKind::DIV_EVEN, (VecX(2) << -0.05, 0.0).finished(), 1.0};
  } else if (name == "wide") {
    s.gt_intrinsics = {{630, 392}, 1.0, 600.0};
    s.gt_model = {ModelKind::DIV_EVEN, (VecX(2) << -0.22, 0.005).finished(), 1.0};
  } else if (name == "fisheye") {
    s.gt_intrinsics = {{648, 406}, 1.0, 450.0};
    s.gt_model = {ModelKind::DIV_EVEN, (VecX(2) << -0.33, 0.02).finished(), 1.0};
    s.min_distance = 1.2;
    s.max_distance = 3.5;
  } else if (name == "catadioptric") {
    s.gt_intrinsics = {{640, 402}, 1.0, 380.0};
    s.gt_model = {ModelKind::DIV_EVEN, (VecX(2) << -0.48, 0.03).finished(), 1.0};
    s.min_distance = 1.0;
    s.max_distance = 2.5;
  } else {
    raise(Err::InputError, "unknown preset '" + name + "'");
  }
  return s;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"pinhole", "wide", "fisheye",
                                                 "catadioptric"};
  return names;
}

/// Diagonal field of view implied by a division profile, degrees.
inline double profile_dfov_deg(const BackProjCamera& cam) {
  const double r = cam.profile.r_max;
  return 2.0 * std::atan2(r, cam.profile.psi(r)) * 180.0 / M_PI;
}

// --- Corner-correction study ------------------------------------------------

struct CorrectionStudyConfig {
  Vec2 image_size{1200, 800};
  Vec2 center{700, 500};
  double focal = 400.0;
  // Calibration-style views: the board fills a meaningful part of the frame.
  double min_distance = 0.8;  // board widths
  double max_distance = 2.5;
  std::vector<double> sigmas;  // empty: 0, 0.1, ..., 2.0
  int trials = 1000;
  std::uint64_t seed = 7;

  std::vector<double> sigma_grid() const {
    if (!sigmas.empty()) return sigmas;
    std::vector<double> g;
    for (int i = 0; i <= 20; ++i) g.push_back(i / 10.0);
    return g;
  }
};

struct CorrectionMetrics {
  double center_err = 0.0;
  double rotation_err = 0.0;
  double translation_err = 0.0;
  double grid_rms = 0.0;
};

struct CorrectionStudyRow {
  double sigma = 0.0;
  CorrectionMetrics median_original, median_corrected;
  CorrectionMetrics iqr_original, iqr_corrected;
  int failures_original = 0, failures_corrected = 0;
};

struct CorrectionStudyResult {
  std::string profile;  // "pinhole" or "distorted"
  std::vector<CorrectionStudyRow> rows;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double iqr_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto at = [&](double q) {
    const double pos = q * (static_cast<double>(v.size()) - 1.0);
    const std::size_t i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] * (1.0 - frac) + v[i + 1] * frac : v[i];
  };
  return at(0.75) - at(0.25);
}

/// One synthetic view of the chessboard for the correction study.
inline std::pair<std::vector<Correspondence>, Pose> study_view(
    const BackProjCamera& gt, const Vec2& image_size, double sigma, std::mt19937_64& rng,
    double min_dist = 2.0, double max_dist = 6.0) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int rows = 7, cols = 10;
  const double W = cols - 1.0, H = rows - 1.0;
  const double margin = 2.0;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double dist = (min_dist + (max_dist - min_dist) * uni(rng)) * W;
    const double tilt = 50.0 * M_PI / 180.0 * uni(rng);
    const double azimuth = 2.0 * M_PI * uni(rng);
    const double roll = 2.0 * M_PI * uni(rng);
    const Vec2 jitter((uni(rng) - 0.5) * 0.2 * W, (uni(rng) - 0.5) * 0.2 * H);
    const Pose cam = look_at_pose(Vec3(W / 2, H / 2, 0), dist, tilt, azimuth, roll, jitter);
    std::vector<Correspondence> corrs;
    bool ok = true;
    for (int r = 0; r < rows && ok; ++r)
      for (int c = 0; c < cols && ok; ++c) {
        const Vec2 xy(c, r);
        const Vec3 Xc = cam * Vec3(xy.x(), xy.y(), 0.0);
        Vec2 px;
        if (Xc.z() <= 0.0 || gt.try_project(Xc, &px) != ProjStatus::Ok ||
            px.x() < margin || px.y() < margin || px.x() > image_size.x() - margin ||
            px.y() > image_size.y() - margin) {
          ok = false;
          break;
        }
        corrs.push_back({0, 0, r * cols + c, px, xy});
      }
    if (!ok) continue;
    if (sigma > 0.0) {
      std::normal_distribution<double> gauss(0.0, sigma);
      for (Correspondence& c : corrs) c.u += Vec2(gauss(rng), gauss(rng));
    }
    return {corrs, cam};
  }
  raise(Err::UnreachablePose, "study pose sampling exhausted");
}

inline CorrectionMetrics study_metrics(const SingleViewEstimate& est,
                                       const BackProjCamera& gt, const Pose& gt_pose,
                                       const Vec2& image_size) {
  CorrectionMetrics m;
  m.center_err = (est.camera.intrinsics.e - gt.intrinsics.e).norm();
  m.rotation_err = rotation_angle(est.pose.R, gt_pose.R);
  m.translation_err = (est.pose.center() - gt_pose.center()).norm();

  // Reprojection of an image grid: scene points on the ground-truth rays at
  // the working distance, reprojected by the estimate.
  const double depth = gt_pose.t.norm();
  double sq = 0.0;
  int n = 0;
  for (int gx = 1; gx <= 12; ++gx)
    for (int gy = 1; gy <= 8; ++gy) {
      const Vec2 px(image_size.x() * gx / 13.0, image_size.y() * gy / 9.0);
      Vec3 ray = gt.back_project(px);
      ray.normalize();
      const Vec3 Xw = gt_pose.inverse() * (depth * ray);
      Vec2 proj;
      if (est.camera.try_project(est.pose * Xw, &proj) != ProjStatus::Ok) continue;
      sq += (proj - px).squaredNorm();
      ++n;
    }
  m.grid_rms = n ? std::sqrt(sq / n) : std::numeric_limits<double>::infinity();
  return m;
}

}  // namespace detail

/// Fig.-2-style experiment: the single-view cascade with and without corner
/// correction across a noise grid, with median/IQR error summaries. Runs the
/// pinhole and a distorted ground-truth profile.
inline std::vector<CorrectionStudyResult> corner_correction_study(
    const CorrectionStudyConfig& cfg) {
  std::vector<CorrectionStudyResult> results;
  const std::vector<double> sigmas = cfg.sigma_grid();

  for (const std::string& profile : {std::string("distorted"), std::string("pinhole")}) {
    BackProjCamera gt;
    gt.intrinsics = {cfg.center, 1.0, cfg.focal};
    // "pinhole" carries the faint distortion of a real lens; with an exactly
    // zero profile the center of projection is unobservable.
    gt.profile.coeffs = profile == "pinhole" ? (VecX(2) << -0.02, 0.0).finished()
                                             : (VecX(2) << -0.2, 0.01).finished();
    gt.profile.r_max =
        max_retinal_radius(gt.intrinsics, cfg.image_size.x(), cfg.image_size.y());

    CorrectionStudyResult res;
    res.profile = profile;
    res.rows.resize(sigmas.size());

    for (std::size_t si = 0; si < sigmas.size(); ++si) {
      const double sigma = sigmas[si];
      struct TrialOut {
        CorrectionMetrics orig, corr;
        bool orig_ok = false, corr_ok = false;
      };
      std::vector<TrialOut> trials(cfg.trials);
      parallel_for(cfg.trials, [&](std::size_t t) {
        std::mt19937_64 rng = make_rng(cfg.seed, (profile == "pinhole" ? 1u : 0u) +
                                                     2u * (si * 1000003u + t));
        const auto [corrs, gt_pose] = detail::study_view(gt, cfg.image_size, sigma, rng,
                                                         cfg.min_distance, cfg.max_distance);
        TrialOut& out = trials[t];
        try {
          const SingleViewEstimate est =
              initialize_single_view(corrs, 1.0, 2, /*correct=*/false, cfg.image_size);
          out.orig = detail::study_metrics(est, gt, gt_pose, cfg.image_size);
          out.orig_ok = true;
        } catch (const CalibError&) {
        }
        try {
          const SingleViewEstimate est =
              initialize_single_view(corrs, 1.0, 2, /*correct=*/true, cfg.image_size);
          out.corr = detail::study_metrics(est, gt, gt_pose, cfg.image_size);
          out.corr_ok = true;
        } catch (const CalibError&) {
        }
      });

      CorrectionStudyRow& row = res.rows[si];
      row.sigma = sigma;
      const auto collect = [&](bool corrected, auto member) {
        std::vector<double> v;
        for (const TrialOut& t : trials) {
          const bool ok = corrected ? t.corr_ok : t.orig_ok;
          if (ok) v.push_back((corrected ? t.corr : t.orig).*member);
        }
        return v;
      };
      const auto fill = [&](CorrectionMetrics& med, CorrectionMetrics& iqr, bool corrected) {
        med.center_err = detail::median_of(collect(corrected, &CorrectionMetrics::center_err));
        med.rotation_err =
            detail::median_of(collect(corrected, &CorrectionMetrics::rotation_err));
        med.translation_err =
            detail::median_of(collect(corrected, &CorrectionMetrics::translation_err));
        med.grid_rms = detail::median_of(collect(corrected, &CorrectionMetrics::grid_rms));
        iqr.center_err = detail::iqr_of(collect(corrected, &CorrectionMetrics::center_err));
        iqr.rotation_err =
            detail::iqr_of(collect(corrected, &CorrectionMetrics::rotation_err));
        iqr.translation_err =
            detail::iqr_of(collect(corrected, &CorrectionMetrics::translation_err));
        iqr.grid_rms = detail::iqr_of(collect(corrected, &CorrectionMetrics::grid_rms));
      };
      fill(row.median_original, row.iqr_original, false);
      fill(row.median_corrected, row.iqr_corrected, true);
      for (const TrialOut& t : trials) {
        row.failures_original += t.orig_ok ? 0 : 1;
        row.failures_corrected += t.corr_ok ? 0 : 1;
      }
    }
    results.push_back(std::move(res));
  }
  return results;
}

/// Mean-of-medians reduction ratios (corrected / original) over the sigma
/// grid for rotation, translation and grid RMS.
struct CorrectionReduction {
  double rotation = 1.0, translation = 1.0, rms = 1.0;
};

inline CorrectionReduction correction_reduction(const CorrectionStudyResult& res) {
  double ro = 0, rc = 0, to = 0, tc = 0, go = 0, gc = 0;
  for (const CorrectionStudyRow& row : res.rows) {
    ro += row.median_original.rotation_err;
    rc += row.median_corrected.rotation_err;
    to += row.median_original.translation_err;
    tc += row.median_corrected.translation_err;
    go += row.median_original.grid_rms;
    gc += row.median_corrected.grid_rms;
  }
  CorrectionReduction out;
  out.rotation = rc / std::max(ro, 1e-300);
  out.translation = tc / std::max(to, 1e-300);
  out.rms = gc / std::max(go, 1e-300);
  return out;
}

// --- Degree-selection study --------------------------------------------------

struct DegreeStudyConfig {
  std::vector<std::string> presets;  // empty: all four
  std::vector<int> degrees = {2, 4, 6, 8, 10};
  int n_images = 8;
  double noise_sigma = 0.75;
  double outlier_fraction = 0.0;
  int iterations = 80;
  std::uint64_t seed = 11;
};

struct DegreeStudyRow {
  std::string preset;
  int degree = 0;
  double initial_rms = 0.0;
  double initial_inlier_pct = 0.0;
  double refined_rms = 0.0;
  double refined_inlier_pct = 0.0;
  bool failed = false;
};

/// Table-2-style experiment: run the pipeline per division degree and report
/// initial (best raw proposal) and refined weighted RMS / inlier ratio.
inline std::vector<DegreeStudyRow> degree_selection_study(const DegreeStudyConfig& cfg) {
  const std::vector<std::string> presets =
      cfg.presets.empty() ? preset_names() : cfg.presets;
  std::vector<DegreeStudyRow> rows(presets.size() * cfg.degrees.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    const std::string& preset = presets[i / cfg.degrees.size()];
    const int degree = cfg.degrees[i % cfg.degrees.size()];
    SceneSpec spec = preset_scene(preset);
    spec.n_images = cfg.n_images;
    spec.noise_sigma = cfg.noise_sigma;
    spec.outlier_fraction = cfg.outlier_fraction;
    spec.rng_seed = cfg.seed;
    const auto [ds, gt] = generate(spec);

    RansacConfig rc;
    rc.iterations = cfg.iterations;
    rc.division_degree = degree / 2;
    rc.rng_seed = cfg.seed + 1;
    DegreeStudyRow& row = rows[i];
    row.preset = preset;
    row.degree = degree;
    try {
      const CalibrationResult result = calibrate(ds, ModelKind::DIV_EVEN, rc);
      row.initial_rms = result.best_initial_score.rms_weighted;
      row.initial_inlier_pct = 100.0 * result.best_initial_score.inlier_ratio;
      row.refined_rms = result.score.rms_weighted;
      row.refined_inlier_pct = 100.0 * result.score.inlier_ratio;
    } catch (const CalibError&) {
      row.failed = true;
      row.initial_rms = row.refined_rms = std::numeric_limits<double>::infinity();
    }
  });
  return rows;
}

}  // namespace babelcalib
