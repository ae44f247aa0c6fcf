#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "babelcalib/dataset.hpp"
#include "babelcalib/geometry.hpp"
#include "babelcalib/models.hpp"
#include "babelcalib/regress.hpp"
#include "babelcalib/types.hpp"

namespace babelcalib {

struct RansacConfig {
  int iterations = 200;
  int sample_size = 14;
  double huber_scale = 2.0;  // tau, pixels; doubles as the inlier threshold
  std::vector<double> aspect_samples = {1.0};
  int division_degree = 2;
  std::uint64_t rng_seed = 0;
  double profile_radius_scale = 1.0;  // profile-regression sample range override
  int early_exit_stagnation = 20;
  double early_exit_inlier_ratio = 0.99;
  int max_p3p_triples = 10;
  int lo_max_iterations = 30;
  int final_max_iterations = 100;

  bool optimize_aspect() const {
    return aspect_samples.size() > 1 ||
           (aspect_samples.size() == 1 && aspect_samples[0] != 1.0);
  }

  void validate() const {
    if (sample_size < 8) raise(Err::InputError, "sample_size must be at least 8");
    if (iterations < 1) raise(Err::InputError, "iterations must be at least 1");
    if (!(huber_scale > 0)) raise(Err::InputError, "huber_scale must be positive");
    if (division_degree < 1 || division_degree > 6)
      raise(Err::InputError, "division_degree out of supported range [1, 6]");
    if (aspect_samples.empty()) raise(Err::InputError, "aspect_samples must be non-empty");
  }
};

struct Score {
  double loss = 0.0;          // robust objective J
  double inlier_ratio = 0.0;  // I
  double rms_weighted = 0.0;  // sqrt(sum min(d^2, tau(2d - tau)) / M)
  double rms_inlier = 0.0;    // plain RMS over inliers
  std::int64_t n_corrs = 0;
  std::int64_t n_unprojectable = 0;
};

/// Full calibration state Theta: target model, intrinsics, the division
/// back-projection it was estimated through, and all poses. Per-(board,
/// image) poses compose as R_jk = R^c_k R^b_j, t_jk = R^c_k t^b_j + t^c_k.
struct Calibration {
  TargetModel model;
  Intrinsics intrinsics;
  DivisionProfile back_projection;
  std::map<int, Pose> camera_poses;  // image_id -> camera pose
  std::map<int, Pose> board_poses;   // board_id -> board pose (reference = identity)
  int reference_board = -1;
};

inline Pose compose_pose(const Pose& cam_pose, const Pose& board_pose) {
  return cam_pose * board_pose;
}

/// Field-of-view bound for the root search, refreshed from the current
/// intrinsics: image-corner radius when the image size is known, otherwise
/// the largest observed detection radius with a small margin.
inline double field_radius(const Dataset& ds, const Intrinsics& intr) {
  if (ds.image_size)
    return max_retinal_radius(intr, ds.image_size->x(), ds.image_size->y());
  return max_observed_radius_px(ds, intr.e, intr.a) / intr.f * 1.1;
}

/// Projection context; r_max of backward kinds tracks the intrinsics.
struct Projector {
  TargetModel model;
  Intrinsics intr;

  ProjStatus operator()(const Vec3& Xc, Vec2* px) const {
    return try_project_target(model, intr, Xc, px);
  }
};

inline Projector make_projector(const Calibration& calib, const Dataset& ds) {
  Projector p{calib.model, calib.intrinsics};
  if (p.model.is_backward()) p.model.r_max = field_radius(ds, calib.intrinsics);
  return p;
}

namespace detail {

struct LossAccumulator {
  double tau;
  double J = 0.0;
  std::int64_t n = 0, inliers = 0, unprojectable = 0;
  double sum_capped_sq = 0.0;
  double sum_inlier_sq = 0.0;

  explicit LossAccumulator(double t) : tau(t) {}

  void add(double d, bool projectable) {
    ++n;
    if (!projectable) {
      ++unprojectable;
      d = kSaturatedResidualPx;
    }
    J += huber(d, tau);
    // Huber-capped squared residual: d^2 below tau, tau(2d - tau) above.
    sum_capped_sq += 2.0 * huber(d, tau);
    if (projectable && d <= tau) {
      ++inliers;
      sum_inlier_sq += d * d;
    }
  }

  Score score() const {
    Score s;
    s.loss = J;
    s.n_corrs = n;
    s.n_unprojectable = unprojectable;
    s.inlier_ratio = n ? static_cast<double>(inliers) / static_cast<double>(n) : 0.0;
    s.rms_weighted = n ? std::sqrt(sum_capped_sq / static_cast<double>(n)) : 0.0;
    s.rms_inlier = inliers ? std::sqrt(sum_inlier_sq / static_cast<double>(inliers)) : 0.0;
    return s;
  }
};

}  // namespace detail

/// Robust objective over the whole capture. Correspondences without a pose
/// or outside the modeled field of view contribute the saturated loss and
/// count as outliers.
inline Score robust_loss(const Calibration& calib, const Dataset& ds, double tau) {
  const Projector project = make_projector(calib, ds);
  detail::LossAccumulator acc(tau);
  for (const auto& [image_id, boards] : ds.index()) {
    const auto cam_it = calib.camera_poses.find(image_id);
    for (const auto& [board_id, range] : boards) {
      const auto board_it = calib.board_poses.find(board_id);
      const bool has_pose =
          cam_it != calib.camera_poses.end() && board_it != calib.board_poses.end();
      Pose pose;
      if (has_pose) pose = compose_pose(cam_it->second, board_it->second);
      for (std::size_t i = range.first; i < range.first + range.second; ++i) {
        const Correspondence& c = ds.correspondences[i];
        if (!has_pose) {
          acc.add(0.0, false);
          continue;
        }
        Vec2 px;
        if (project(pose * Vec3(c.X.x(), c.X.y(), 0.0), &px) == ProjStatus::Ok)
          acc.add((px - c.u).norm(), true);
        else
          acc.add(0.0, false);
      }
    }
  }
  return acc.score();
}

struct ResidualRecord {
  int image_id = 0, board_id = 0, fiducial_id = 0;
  Vec2 u = Vec2::Zero();
  Vec2 projected = Vec2::Zero();
  double distance = 0.0;
  bool projectable = false;
  bool inlier = false;
};

inline std::vector<ResidualRecord> residual_records(const Calibration& calib,
                                                    const Dataset& ds, double tau) {
  const Projector project = make_projector(calib, ds);
  std::vector<ResidualRecord> out;
  out.reserve(ds.correspondences.size());
  for (const Correspondence& c : ds.correspondences) {
    ResidualRecord rec;
    rec.image_id = c.image_id;
    rec.board_id = c.board_id;
    rec.fiducial_id = c.fiducial_id;
    rec.u = c.u;
    const auto cam_it = calib.camera_poses.find(c.image_id);
    const auto board_it = calib.board_poses.find(c.board_id);
    if (cam_it != calib.camera_poses.end() && board_it != calib.board_poses.end()) {
      const Pose pose = compose_pose(cam_it->second, board_it->second);
      Vec2 px;
      if (project(pose * Vec3(c.X.x(), c.X.y(), 0.0), &px) == ProjStatus::Ok) {
        rec.projected = px;
        rec.distance = (px - c.u).norm();
        rec.projectable = true;
        rec.inlier = rec.distance <= tau;
      }
    }
    if (!rec.projectable) rec.distance = kSaturatedResidualPx;
    out.push_back(rec);
  }
  return out;
}

// --- Single-view initialization cascade -----------------------------------

inline double max_span_radius_px(std::span<const Correspondence> corrs, const Vec2& e,
                                 double aspect) {
  double r = 0.0;
  for (const Correspondence& c : corrs)
    r = std::max(r, std::hypot((c.u.x() - e.x()) / aspect, c.u.y() - e.y()));
  return r;
}

/// Output of the closed-form cascade on one view of one board.
struct SingleViewEstimate {
  RadialFundamental F;
  std::vector<Vec2> corrected;  // corrected corners, input order
  BackProjCamera camera;
  Pose pose;  // board-to-camera of the estimated view
  double linear_residual = 0.0;
  double reproj_rms = 0.0;
};

/// 7-pt radial F -> (optional) refinement + corner correction -> pose from
/// orthonormality -> linear intrinsics/depth. Candidates are gated by
/// cheirality, positive focal length and a scale-free reprojection bound;
/// survivors are ranked by the linear-system residual.
inline SingleViewEstimate initialize_single_view(std::span<const Correspondence> corrs,
                                                 double aspect, int degree,
                                                 bool correct_corners_flag,
                                                 std::optional<Vec2> image_size = {}) {
  // Candidates arrive ordered by epipolar consistency (best first).
  const std::vector<Mat3> f_candidates = solve_radial_F(corrs);

  Vec2 lo = corrs[0].u, hi = corrs[0].u;
  for (const Correspondence& c : corrs) {
    lo = lo.cwiseMin(c.u);
    hi = hi.cwiseMax(c.u);
  }
  const double bbox = (hi - lo).norm();

  std::string last_error = "all candidates rejected";
  for (std::size_t fi = 0; fi < f_candidates.size(); ++fi) {
    try {
      RadialFundamental rf;
      std::vector<Vec2> corrected;
      if (correct_corners_flag) {
        const RefineFResult ref = refine_F(corrs, f_candidates[fi]);
        rf = ref.F;
        corrected = ref.corrected;
      } else {
        rf = factor_radial_F(f_candidates[fi]);
        corrected.reserve(corrs.size());
        for (const Correspondence& c : corrs) corrected.push_back(c.u);
      }

      std::vector<Vec2> xs;
      xs.reserve(corrs.size());
      for (const Correspondence& c : corrs) xs.push_back(c.X);

      std::optional<SingleViewEstimate> view_best;
      for (const PartialPose& pp : solve_pose(rf, aspect)) {
        IntrinsicsDepth id;
        try {
          id = solve_intrinsics_depth(corrected, xs, pp, rf.e, aspect, degree);
        } catch (const CalibError&) {
          continue;
        }
        Pose pose;
        pose.R = pp.R;
        pose.t = Vec3(pp.t_xy.x(), pp.t_xy.y(), id.t_z);

        int positive = 0;
        for (const Correspondence& c : corrs)
          if ((pose * Vec3(c.X.x(), c.X.y(), 0.0)).z() > 0.0) ++positive;
        if (2 * positive <= static_cast<int>(corrs.size())) continue;

        SingleViewEstimate est;
        est.F = rf;
        est.corrected = corrected;
        est.pose = pose;
        est.camera.intrinsics = {rf.e, aspect, id.f};
        est.camera.profile.coeffs = id.lambdas;
        est.camera.profile.r_max =
            image_size ? max_retinal_radius(est.camera.intrinsics, image_size->x(),
                                            image_size->y())
                       : max_span_radius_px(corrs, rf.e, aspect) / id.f * 1.1;
        est.linear_residual = id.residual_rms;

        double sq = 0.0;
        for (std::size_t i = 0; i < corrs.size(); ++i) {
          Vec2 px;
          if (est.camera.try_project(pose * Vec3(xs[i].x(), xs[i].y(), 0.0), &px) ==
              ProjStatus::Ok)
            sq += (px - corrected[i]).squaredNorm();
          else
            sq += bbox * bbox;
        }
        est.reproj_rms = std::sqrt(sq / static_cast<double>(corrs.size()));
        if (est.reproj_rms > 0.05 * bbox) continue;

        if (!view_best || est.linear_residual < view_best->linear_residual) view_best = est;
      }
      if (view_best) return *view_best;  // F candidates were ordered best-first
    } catch (const CalibError& err) {
      last_error = err.what();
    }
  }
  raise(Err::ProposalFailed, std::string("single-view cascade failed: ") + last_error);
}

// --- Pose graph assembly ---------------------------------------------------

/// Camera and board poses from per-(board, image) poses, anchored at the
/// reference board. BFS over the co-visibility graph; a board is placed
/// through the co-visible image with the most corners.
inline void assemble_pose_graph(const Dataset& ds,
                                const std::map<std::pair<int, int>, Pose>& pair_poses,
                                int reference_board, Calibration* calib) {
  calib->reference_board = reference_board;
  calib->board_poses.clear();
  calib->camera_poses.clear();
  calib->board_poses[reference_board] = Pose{};

  bool grown = true;
  while (grown) {
    grown = false;
    // Images: any placed board observed in the image fixes the camera.
    for (const auto& [key, pose_jk] : pair_poses) {
      const auto [board_id, image_id] = key;
      if (calib->camera_poses.count(image_id) || !calib->board_poses.count(board_id)) continue;
      const Pose& board = calib->board_poses.at(board_id);
      calib->camera_poses[image_id] = {pose_jk.R * board.R.transpose(),
                                       pose_jk.t - pose_jk.R * board.R.transpose() * board.t};
      grown = true;
    }
    // Boards: pick the placed image with the most corners of that board.
    std::map<int, std::pair<std::size_t, const Pose*>> best_edge;  // board -> (corners, pose)
    std::map<int, int> best_image;
    for (const auto& [key, pose_jk] : pair_poses) {
      const auto [board_id, image_id] = key;
      if (calib->board_poses.count(board_id) || !calib->camera_poses.count(image_id)) continue;
      const std::size_t n = ds.corrs(image_id, board_id).size();
      auto& cur = best_edge[board_id];
      if (n > cur.first) {
        cur = {n, &pose_jk};
        best_image[board_id] = image_id;
      }
    }
    for (const auto& [board_id, edge] : best_edge) {
      const Pose& cam = calib->camera_poses.at(best_image.at(board_id));
      const Pose& pose_jk = *edge.second;
      calib->board_poses[board_id] = {cam.R.transpose() * pose_jk.R,
                                      cam.R.transpose() * (pose_jk.t - cam.t)};
      grown = true;
    }
  }
}

// --- Model proposal --------------------------------------------------------

/// One RANSAC model proposal (Alg.-1 style): single-view cascade on the
/// sampled (image, board, 14 corners, aspect), model regression if the
/// target is not the division model, then P3P poses for every other
/// (image, board) pair and pose-graph assembly.
inline Calibration propose_model(const Dataset& ds, ModelKind target_kind,
                                 const RansacConfig& cfg, std::mt19937_64& rng,
                                 double aspect) {
  // Eligible (image, board) pairs.
  std::vector<std::pair<int, int>> eligible;  // (image, board)
  for (const auto& [image_id, boards] : ds.index())
    for (const auto& [board_id, range] : boards)
      if (static_cast<int>(range.second) >= cfg.sample_size)
        eligible.emplace_back(image_id, board_id);
  if (eligible.empty())
    raise(Err::ProposalFailed, "no (image, board) pair has enough correspondences");

  const auto [image0, board0] = eligible[std::uniform_int_distribution<std::size_t>(
      0, eligible.size() - 1)(rng)];
  const std::span<const Correspondence> pool = ds.corrs(image0, board0);

  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (int i = 0; i < cfg.sample_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<Correspondence> sample;
  sample.reserve(cfg.sample_size);
  for (int i = 0; i < cfg.sample_size; ++i) sample.push_back(pool[idx[i]]);

  const SingleViewEstimate est = initialize_single_view(
      sample, aspect, cfg.division_degree, /*correct=*/true, ds.image_size);

  Calibration calib;
  calib.intrinsics = est.camera.intrinsics;
  calib.back_projection = est.camera.profile;
  if (target_kind == ModelKind::DIV_EVEN) {
    calib.model = est.camera.as_target_model();
  } else {
    try {
      calib.model = regress_model(target_kind, est.camera, 100, cfg.profile_radius_scale);
    } catch (const CalibError& err) {
      raise(Err::ProposalFailed, std::string("model regression failed: ") + err.what());
    }
  }

  // Poses for every (board, image) pair with enough corners.
  std::map<std::pair<int, int>, Pose> pair_poses;
  pair_poses[{board0, image0}] = est.pose;
  for (const auto& [image_id, boards] : ds.index()) {
    for (const auto& [board_id, range] : boards) {
      if (board_id == board0 && image_id == image0) continue;
      const std::span<const Correspondence> corrs = ds.corrs(image_id, board_id);
      if (corrs.size() < 4) continue;
      std::mt19937_64 prng = make_rng(rng(), 0x77);
      const auto ray_of = [&](const Vec2& u, Vec3* r) {
        *r = est.camera.back_project(u);
        return true;
      };
      const auto project = [&](const Vec3& Xc, Vec2* px) {
        return est.camera.try_project(Xc, px);
      };
      const std::optional<Pose> pose = estimate_pose_p3p(
          ray_of, project, corrs, cfg.huber_scale, prng, cfg.max_p3p_triples);
      if (pose) pair_poses[{board_id, image_id}] = *pose;
    }
  }

  const int reference = ds.most_observed_board();
  assemble_pose_graph(ds, pair_poses, reference, &calib);
  if (!calib.camera_poses.count(image0))
    raise(Err::ProposalFailed, "sampled image disconnected from the reference board");
  return calib;
}

// --- Bundle adjustment -----------------------------------------------------

struct BundleSummary {
  bool converged = false;
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

namespace detail {

struct BundleWorkspace {
  // Parameter layout: [e_x, e_y, f, (a), theta...] + 6 per image + 6 per
  // non-reference board. Rotations advance by right-composed axis-angle
  // increments, rebased on every accepted step.
  bool opt_aspect = false;
  int n_theta = 0;
  int global_dim = 0;
  std::vector<int> image_ids, board_ids;
  std::map<int, int> image_index, board_index;
  const Dataset* ds = nullptr;
  double tau = 0.0;

  struct Item {
    Vec3 X;
    Vec2 u;
    int img = 0;
    int brd = -1;  // -1: reference board
  };
  std::vector<Item> items;                      // sorted by image (dataset order)
  std::vector<std::pair<int, int>> image_rows;  // per image: [begin, end)
  std::vector<std::vector<int>> board_rows;     // per non-ref board: item indices

  int dim() const {
    return global_dim + 6 * static_cast<int>(image_ids.size() + board_ids.size());
  }
};

inline BundleWorkspace make_bundle_workspace(const Calibration& calib, const Dataset& ds,
                                             const RansacConfig& cfg) {
  BundleWorkspace w;
  w.ds = &ds;
  w.tau = cfg.huber_scale;
  w.opt_aspect = cfg.optimize_aspect();
  w.n_theta = static_cast<int>(calib.model.params.size());
  w.global_dim = 3 + (w.opt_aspect ? 1 : 0) + w.n_theta;
  for (const auto& [id, _] : calib.camera_poses) {
    w.image_index[id] = static_cast<int>(w.image_ids.size());
    w.image_ids.push_back(id);
  }
  for (const auto& [id, _] : calib.board_poses) {
    if (id == calib.reference_board) continue;
    w.board_index[id] = static_cast<int>(w.board_ids.size());
    w.board_ids.push_back(id);
  }
  w.board_rows.resize(w.board_ids.size());
  w.image_rows.assign(w.image_ids.size(), {0, 0});

  for (const auto& [image_id, boards] : ds.index()) {
    const auto ii = w.image_index.find(image_id);
    if (ii == w.image_index.end()) continue;
    for (const auto& [board_id, range] : boards) {
      if (!calib.board_poses.count(board_id)) continue;
      for (std::size_t i = range.first; i < range.first + range.second; ++i) {
        const Correspondence& c = ds.correspondences[i];
        BundleWorkspace::Item item;
        item.X = Vec3(c.X.x(), c.X.y(), 0.0);
        item.u = c.u;
        item.img = ii->second;
        const auto bi = w.board_index.find(board_id);
        item.brd = bi == w.board_index.end() ? -1 : bi->second;
        if (w.image_rows[item.img].second == 0)
          w.image_rows[item.img].first = static_cast<int>(w.items.size());
        w.image_rows[item.img].second = static_cast<int>(w.items.size()) + 1;
        if (item.brd >= 0) w.board_rows[item.brd].push_back(static_cast<int>(w.items.size()));
        w.items.push_back(item);
      }
    }
  }
  return w;
}

/// Calibration with the parameter increment applied.
inline Calibration apply_increment(const Calibration& base, const BundleWorkspace& w,
                                   const VecX& dx) {
  Calibration c = base;
  int at = 0;
  c.intrinsics.e.x() += dx[at++];
  c.intrinsics.e.y() += dx[at++];
  c.intrinsics.f += dx[at++];
  if (w.opt_aspect) c.intrinsics.a += dx[at++];
  for (int i = 0; i < w.n_theta; ++i) c.model.params[i] += dx[at++];
  for (int i = 0; i < static_cast<int>(w.image_ids.size()); ++i, at += 6) {
    Pose& p = c.camera_poses.at(w.image_ids[i]);
    p.R = p.R * rotation_from_axis_angle(Vec3(dx[at], dx[at + 1], dx[at + 2]));
    p.t += Vec3(dx[at + 3], dx[at + 4], dx[at + 5]);
  }
  for (int i = 0; i < static_cast<int>(w.board_ids.size()); ++i, at += 6) {
    Pose& p = c.board_poses.at(w.board_ids[i]);
    p.R = p.R * rotation_from_axis_angle(Vec3(dx[at], dx[at + 1], dx[at + 2]));
    p.t += Vec3(dx[at + 3], dx[at + 4], dx[at + 5]);
  }
  return c;
}

struct BundleEval {
  std::vector<Vec2> resid;     // per item, zero when unprojectable
  std::vector<char> valid;     // projectable flags
  double true_loss = 0.0;      // Huber objective incl. saturation
};

inline void eval_rows(const Calibration& calib, const BundleWorkspace& w, int row_begin,
                      int row_end, const Projector& project,
                      const std::vector<Pose>& composed, BundleEval* out) {
  for (int i = row_begin; i < row_end; ++i) {
    const BundleWorkspace::Item& item = w.items[i];
    const Vec3 Xc = composed[static_cast<std::size_t>(i)] * item.X;
    Vec2 px;
    if (project(Xc, &px) == ProjStatus::Ok) {
      out->resid[i] = px - item.u;
      out->valid[i] = 1;
    } else {
      out->resid[i] = Vec2::Zero();
      out->valid[i] = 0;
    }
  }
}

inline void compose_all(const Calibration& calib, const BundleWorkspace& w,
                        std::vector<Pose>* composed) {
  composed->resize(w.items.size());
  std::vector<const Pose*> cam(w.image_ids.size());
  for (std::size_t i = 0; i < w.image_ids.size(); ++i)
    cam[i] = &calib.camera_poses.at(w.image_ids[i]);
  std::vector<const Pose*> brd(w.board_ids.size());
  for (std::size_t i = 0; i < w.board_ids.size(); ++i)
    brd[i] = &calib.board_poses.at(w.board_ids[i]);
  const Pose& ref = calib.board_poses.at(calib.reference_board);
  for (std::size_t i = 0; i < w.items.size(); ++i) {
    const BundleWorkspace::Item& item = w.items[i];
    const Pose& b = item.brd < 0 ? ref : *brd[item.brd];
    (*composed)[i] = *cam[item.img] * b;
  }
}

inline BundleEval eval_full(const Calibration& calib, const BundleWorkspace& w,
                            const Dataset& ds) {
  BundleEval out;
  out.resid.resize(w.items.size());
  out.valid.assign(w.items.size(), 0);
  if (!calib.model.params_valid() || !(calib.intrinsics.f > 0) || !(calib.intrinsics.a > 0)) {
    out.true_loss = std::numeric_limits<double>::infinity();
    return out;
  }
  Projector project{calib.model, calib.intrinsics};
  if (project.model.is_backward()) project.model.r_max = field_radius(ds, calib.intrinsics);
  std::vector<Pose> composed;
  compose_all(calib, w, &composed);
  eval_rows(calib, w, 0, static_cast<int>(w.items.size()), project, composed, &out);
  double J = 0.0;
  for (std::size_t i = 0; i < w.items.size(); ++i) {
    const double d = out.valid[i] ? out.resid[i].norm() : kSaturatedResidualPx;
    J += huber(d, w.tau);
  }
  // Correspondences outside the workspace (no pose at all) saturate too.
  J += huber(kSaturatedResidualPx, w.tau) *
       static_cast<double>(ds.correspondences.size() - w.items.size());
  out.true_loss = J;
  return out;
}

}  // namespace detail

/// Robust bundle adjustment of Eq.-18 style objective over {theta, K,
/// camera poses, board poses (reference fixed)}. Monotone in the true
/// Huber loss; returns the best iterate on non-convergence.
inline BundleSummary bundle_adjust(Calibration& calib, const Dataset& ds,
                                   const RansacConfig& cfg, int max_iterations = -1) {
  using namespace detail;
  if (max_iterations < 0) max_iterations = cfg.final_max_iterations;
  BundleWorkspace w = make_bundle_workspace(calib, ds, cfg);
  const int P = w.dim();
  const int n_items = static_cast<int>(w.items.size());

  BundleSummary summary;
  BundleEval base = eval_full(calib, w, ds);
  summary.initial_loss = base.true_loss;
  if (!std::isfinite(base.true_loss) || n_items == 0) {
    summary.final_loss = base.true_loss;
    return summary;
  }

  const double tau = cfg.huber_scale;
  double mu = 1e-6;
  int stall = 0;

  for (summary.iterations = 0; summary.iterations < max_iterations; ++summary.iterations) {
    // IRLS weights at the current iterate.
    VecX sqrt_w(n_items);
    for (int i = 0; i < n_items; ++i) {
      if (!base.valid[i]) {
        sqrt_w[i] = 0.0;
        continue;
      }
      const double d = base.resid[i].norm();
      sqrt_w[i] = d <= tau ? 1.0 : std::sqrt(tau / d);
    }

    // Numeric Jacobian, block-sparse in the pose parameters.
    MatX J = MatX::Zero(2 * n_items, P);
    VecX r(2 * n_items);
    for (int i = 0; i < n_items; ++i) {
      r[2 * i] = sqrt_w[i] * base.resid[i].x();
      r[2 * i + 1] = sqrt_w[i] * base.resid[i].y();
    }

    Projector project{calib.model, calib.intrinsics};
    if (project.model.is_backward()) project.model.r_max = field_radius(ds, calib.intrinsics);

    BundleEval plus, minus;
    plus.resid.resize(w.items.size());
    plus.valid.assign(w.items.size(), 0);
    minus.resid.resize(w.items.size());
    minus.valid.assign(w.items.size(), 0);

    // Parameter magnitudes for difference steps (pose increments live at 0).
    VecX param_scale = VecX::Ones(P);
    {
      int at = 0;
      param_scale[at++] = std::max(1.0, std::abs(calib.intrinsics.e.x()));
      param_scale[at++] = std::max(1.0, std::abs(calib.intrinsics.e.y()));
      param_scale[at++] = std::max(1.0, std::abs(calib.intrinsics.f));
      if (w.opt_aspect) param_scale[at++] = std::max(1.0, std::abs(calib.intrinsics.a));
      for (int i = 0; i < w.n_theta; ++i)
        param_scale[at++] = std::max(1.0, std::abs(calib.model.params[i]));
    }

    const auto fill_cols = [&](int param, int row_begin, int row_end,
                               const std::vector<int>* rows) {
      const double step = 6e-6 * param_scale[param];
      VecX dx = VecX::Zero(P);
      dx[param] = step;
      const Calibration cp = apply_increment(calib, w, dx);
      dx[param] = -step;
      const Calibration cm = apply_increment(calib, w, dx);
      Projector pj_p{cp.model, cp.intrinsics};
      if (pj_p.model.is_backward()) pj_p.model.r_max = field_radius(ds, cp.intrinsics);
      Projector pj_m{cm.model, cm.intrinsics};
      if (pj_m.model.is_backward()) pj_m.model.r_max = field_radius(ds, cm.intrinsics);
      std::vector<Pose> comp_p, comp_m;
      compose_all(cp, w, &comp_p);
      compose_all(cm, w, &comp_m);
      const auto do_rows = [&](int b, int e) {
        eval_rows(cp, w, b, e, pj_p, comp_p, &plus);
        eval_rows(cm, w, b, e, pj_m, comp_m, &minus);
        for (int i = b; i < e; ++i) {
          if (!plus.valid[i] || !minus.valid[i] || !base.valid[i]) continue;
          const Vec2 g = (plus.resid[i] - minus.resid[i]) / (2.0 * step);
          J(2 * i, param) = sqrt_w[i] * g.x();
          J(2 * i + 1, param) = sqrt_w[i] * g.y();
        }
      };
      if (rows) {
        for (int i : *rows) do_rows(i, i + 1);
      } else {
        do_rows(row_begin, row_end);
      }
    };

    for (int pgl = 0; pgl < w.global_dim; ++pgl) fill_cols(pgl, 0, n_items, nullptr);
    for (std::size_t im = 0; im < w.image_ids.size(); ++im) {
      const auto [rb, re] = w.image_rows[im];
      for (int k = 0; k < 6; ++k)
        fill_cols(w.global_dim + 6 * static_cast<int>(im) + k, rb, re, nullptr);
    }
    for (std::size_t bd = 0; bd < w.board_ids.size(); ++bd) {
      const int base_param = w.global_dim + 6 * static_cast<int>(w.image_ids.size() + bd);
      for (int k = 0; k < 6; ++k) fill_cols(base_param + k, 0, 0, &w.board_rows[bd]);
    }

    MatX H = J.transpose() * J;
    const VecX g = J.transpose() * r;
    const double diag_max = std::max(H.diagonal().maxCoeff(), 1e-12);

    bool accepted = false;
    for (int attempt = 0; attempt < 12; ++attempt) {
      MatX Hd = H;
      for (int j = 0; j < P; ++j) Hd(j, j) += mu * std::max(H(j, j), 1e-10 * diag_max);
      const VecX step = Hd.ldlt().solve(-g);
      if (!step.allFinite()) {
        mu *= 4.0;
        continue;
      }
      const Calibration cand = apply_increment(calib, w, step);
      BundleEval cand_eval = eval_full(cand, w, ds);
      if (cand_eval.true_loss < base.true_loss) {
        const double decrease =
            (base.true_loss - cand_eval.true_loss) / std::max(base.true_loss, 1e-300);
        calib = cand;
        base = std::move(cand_eval);
        mu = std::max(mu / 3.0, 1e-12);
        accepted = true;
        stall = decrease < 1e-12 ? stall + 1 : 0;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted || stall >= 2 || base.true_loss < 1e-28) {
      summary.converged = true;
      break;
    }
  }
  summary.final_loss = base.true_loss;
  // Keep the division block in sync when it is the estimated model.
  if (calib.model.kind == ModelKind::DIV_EVEN) {
    calib.back_projection.coeffs = calib.model.params;
    calib.back_projection.r_max = field_radius(ds, calib.intrinsics);
    calib.model.r_max = calib.back_projection.r_max;
  }
  return summary;
}

// --- Pose-only robust refinement (hold-out evaluation) ---------------------

namespace detail {

/// Robust LM over a single camera pose with intrinsics and board poses
/// frozen: board points are pre-composed into the reference frame and the
/// shared pose refiner does the rest.
inline Pose refine_pose_robust(const Projector& project,
                               std::span<const Correspondence> corrs,
                               const std::map<int, Pose>& board_poses, Pose pose, double tau,
                               int max_iterations = 40) {
  std::vector<std::pair<Vec3, Vec2>> items;
  items.reserve(corrs.size());
  for (const Correspondence& c : corrs) {
    const auto bit = board_poses.find(c.board_id);
    if (bit == board_poses.end()) continue;
    items.emplace_back(bit->second * Vec3(c.X.x(), c.X.y(), 0.0), c.u);
  }
  return refine_pose_huber(project, items, pose, tau, max_iterations);
}

}  // namespace detail

// --- Calibrate -------------------------------------------------------------

struct CalibrationResult {
  Calibration calib;
  Score score;
  std::vector<ResidualRecord> residuals;
  Score best_initial_score;  // best raw proposal before local optimization
  int proposals_succeeded = 0;
  int iterations_run = 0;
  bool final_ba_converged = false;
};

/// RANSAC-style robust calibration (proposals ranked by loss, local
/// optimization on best-so-far, final bundle adjustment). Deterministic
/// given the config seed.
inline CalibrationResult calibrate(const Dataset& ds, ModelKind target_kind,
                                   const RansacConfig& cfg) {
  cfg.validate();
  bool enough = false;
  for (const auto& [image_id, boards] : ds.index())
    for (const auto& [board_id, range] : boards)
      if (static_cast<int>(range.second) >= cfg.sample_size) enough = true;
  if (!enough)
    raise(Err::CalibrationFailed,
          "no single (image, board) view has " + std::to_string(cfg.sample_size) +
              " correspondences");

  const double tau = cfg.huber_scale;
  std::optional<Calibration> best;
  Score best_score;
  double best_J0 = std::numeric_limits<double>::infinity();
  double best_J = std::numeric_limits<double>::infinity();
  Score best_initial;
  int stagnation = 0;
  int succeeded = 0;
  int iters = 0;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    iters = iter + 1;
    std::mt19937_64 rng = make_rng(cfg.rng_seed, static_cast<std::uint64_t>(iter));
    const double aspect = cfg.aspect_samples[iter % cfg.aspect_samples.size()];
    Calibration proposal;
    try {
      proposal = propose_model(ds, target_kind, cfg, rng, aspect);
    } catch (const CalibError&) {
      ++stagnation;
      continue;
    }
    ++succeeded;
    const Score s0 = robust_loss(proposal, ds, tau);
    bool improved = false;
    if (s0.loss < best_J0) {
      best_J0 = s0.loss;
      best_initial = s0;
      Calibration refined = proposal;
      bundle_adjust(refined, ds, cfg, cfg.lo_max_iterations);
      const Score s_lo = robust_loss(refined, ds, tau);
      if (s_lo.loss < best_J) {
        best_J = s_lo.loss;
        best = refined;
        best_score = s_lo;
        improved = true;
      }
    }
    stagnation = improved ? 0 : stagnation + 1;
    if (best && stagnation >= cfg.early_exit_stagnation &&
        best_score.inlier_ratio > cfg.early_exit_inlier_ratio)
      break;
  }
  if (!best) raise(Err::CalibrationFailed, "no proposal succeeded");

  CalibrationResult out;
  out.calib = *best;
  out.final_ba_converged =
      bundle_adjust(out.calib, ds, cfg, cfg.final_max_iterations).converged;
  out.score = robust_loss(out.calib, ds, tau);
  out.residuals = residual_records(out.calib, ds, tau);
  out.best_initial_score = best_initial;
  out.proposals_succeeded = succeeded;
  out.iterations_run = iters;
  return out;
}

// --- Hold-out evaluation ----------------------------------------------------

struct HoldoutResult {
  Score score;
  std::map<int, Pose> camera_poses;
  std::vector<int> failed_images;  // NoPose, excluded from the score
};

/// Pose-only evaluation with frozen intrinsics: P3P initialization (with the
/// calibration's stored pose as an extra candidate when present) followed by
/// robust pose refinement, per test image.
inline HoldoutResult evaluate_holdout(const Calibration& calib, const Dataset& test,
                                      const RansacConfig& cfg) {
  HoldoutResult out;
  const double tau = cfg.huber_scale;
  const Projector project = make_projector(calib, test);
  const ModelBackProjector inverter(project.model, calib.intrinsics);

  detail::LossAccumulator acc(tau);
  for (const auto& [image_id, boards] : test.index()) {
    // All corrs of this image whose boards have known poses.
    std::vector<Correspondence> corrs;
    int best_board = -1;
    std::size_t best_n = 0;
    for (const auto& [board_id, range] : boards) {
      if (!calib.board_poses.count(board_id)) continue;
      for (std::size_t i = range.first; i < range.first + range.second; ++i)
        corrs.push_back(test.correspondences[i]);
      if (range.second > best_n) {
        best_n = range.second;
        best_board = board_id;
      }
    }
    if (best_board < 0 || corrs.size() < 4) {
      out.failed_images.push_back(image_id);
      continue;
    }

    // P3P on the best board in board-local coordinates, then compose.
    std::mt19937_64 rng = make_rng(0xe7a1u, static_cast<std::uint64_t>(image_id));
    const auto ray_of = [&](const Vec2& u, Vec3* r) { return inverter.try_back_project(u, r); };
    const auto proj_fn = [&](const Vec3& Xc, Vec2* px) { return project(Xc, px); };
    std::optional<Pose> cam_pose;
    const std::optional<Pose> board_pose_est = estimate_pose_p3p(
        ray_of, proj_fn, test.corrs(image_id, best_board), tau, rng, cfg.max_p3p_triples);
    if (board_pose_est) {
      const Pose& b = calib.board_poses.at(best_board);
      cam_pose = Pose{board_pose_est->R * b.R.transpose(),
                      board_pose_est->t - board_pose_est->R * b.R.transpose() * b.t};
    }

    const auto image_loss = [&](const Pose& p) {
      double J = 0.0;
      for (const Correspondence& c : corrs) {
        const Pose composed = p * calib.board_poses.at(c.board_id);
        Vec2 px;
        double d = kSaturatedResidualPx;
        if (project(composed * Vec3(c.X.x(), c.X.y(), 0.0), &px) == ProjStatus::Ok)
          d = (px - c.u).norm();
        J += huber(d, tau);
      }
      return J;
    };

    // The stored pose (if any) competes as an initialization candidate.
    const auto stored = calib.camera_poses.find(image_id);
    if (stored != calib.camera_poses.end()) {
      if (!cam_pose || image_loss(stored->second) < image_loss(*cam_pose))
        cam_pose = stored->second;
    }
    if (!cam_pose) {
      out.failed_images.push_back(image_id);
      continue;
    }

    const Pose refined = detail::refine_pose_robust(project, corrs, calib.board_poses,
                                                    *cam_pose, tau);
    out.camera_poses[image_id] = refined;
    for (const Correspondence& c : corrs) {
      const Pose composed = refined * calib.board_poses.at(c.board_id);
      Vec2 px;
      if (project(composed * Vec3(c.X.x(), c.X.y(), 0.0), &px) == ProjStatus::Ok)
        acc.add((px - c.u).norm(), true);
      else
        acc.add(0.0, false);
    }
  }
  out.score = acc.score();
  return out;
}

}  // namespace babelcalib
