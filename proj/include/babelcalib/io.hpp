#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "babelcalib/calib.hpp"
#include "babelcalib/dataset.hpp"
#include "babelcalib/synth.hpp"
#include "babelcalib/types.hpp"

namespace babelcalib {

using json = nlohmann::json;

// --- Strict JSON helpers ----------------------------------------------------

namespace detail {

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) raise(Err::InputError, path + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) raise(Err::InputError, path + ": unknown field '" + key + "'");
}

inline const json& require(const json& j, const char* key, const std::string& path) {
  const auto it = j.find(key);
  if (it == j.end()) raise(Err::InputError, path + ": missing field '" + key + "'");
  return *it;
}

inline double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) raise(Err::InputError, path + ": expected a number");
  return j.get<double>();
}

inline int as_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) raise(Err::InputError, path + ": expected an integer");
  return j.get<int>();
}

inline json parse_file(const std::string& filename) {
  std::ifstream in(filename);
  if (!in) raise(Err::InputError, "cannot open '" + filename + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(Err::InputError, filename + ": " + e.what());
  }
  return j;
}

inline void write_file(const std::string& filename, const std::string& text) {
  std::ofstream out(filename);
  if (!out) raise(Err::InputError, "cannot write '" + filename + "'");
  out << text;
}

inline json vec_to_json(const VecX& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline VecX vec_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) raise(Err::InputError, path + ": expected an array");
  VecX v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = as_number(j[i], path);
  return v;
}

}  // namespace detail

// --- Boards / detections ------------------------------------------------------

inline json boards_to_json(const std::vector<Board>& boards) {
  json out;
  json arr = json::array();
  for (const Board& b : boards) {
    json jb;
    jb["board_id"] = b.id;
    json fids = json::array();
    for (const Fiducial& f : b.fiducials)
      fids.push_back({{"fiducial_id", f.id}, {"x", f.xy.x()}, {"y", f.xy.y()}});
    jb["fiducials"] = fids;
    arr.push_back(jb);
  }
  out["boards"] = arr;
  return out;
}

inline std::vector<Board> boards_from_json(const json& j) {
  detail::check_keys(j, "$", {"boards"});
  const json& arr = detail::require(j, "boards", "$");
  if (!arr.is_array()) raise(Err::InputError, "$.boards: expected an array");
  std::vector<Board> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "$.boards[" + std::to_string(i) + "]";
    detail::check_keys(arr[i], path, {"board_id", "fiducials"});
    Board b;
    b.id = detail::as_int(detail::require(arr[i], "board_id", path), path + ".board_id");
    const json& fids = detail::require(arr[i], "fiducials", path);
    for (std::size_t k = 0; k < fids.size(); ++k) {
      const std::string fp = path + ".fiducials[" + std::to_string(k) + "]";
      detail::check_keys(fids[k], fp, {"fiducial_id", "x", "y"});
      Fiducial f;
      f.id = detail::as_int(detail::require(fids[k], "fiducial_id", fp), fp + ".fiducial_id");
      f.xy.x() = detail::as_number(detail::require(fids[k], "x", fp), fp + ".x");
      f.xy.y() = detail::as_number(detail::require(fids[k], "y", fp), fp + ".y");
      b.fiducials.push_back(f);
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline json detections_to_json(const Dataset& ds) {
  json out;
  if (ds.image_size)
    out["image_size"] = {ds.image_size->x(), ds.image_size->y()};
  json arr = json::array();
  for (const Correspondence& c : ds.correspondences)
    arr.push_back({{"image_id", c.image_id},
                   {"board_id", c.board_id},
                   {"fiducial_id", c.fiducial_id},
                   {"u", c.u.x()},
                   {"v", c.u.y()}});
  out["detections"] = arr;
  return out;
}

/// Parse detections and cross-validate against the boards.
inline Dataset dataset_from_json(const json& jdet, const std::vector<Board>& boards) {
  detail::check_keys(jdet, "$", {"image_size", "detections"});
  Dataset ds;
  ds.boards = boards;
  if (jdet.contains("image_size")) {
    const json& sz = jdet["image_size"];
    if (!sz.is_array() || sz.size() != 2)
      raise(Err::InputError, "$.image_size: expected [width, height]");
    ds.image_size = Vec2(detail::as_number(sz[0], "$.image_size"),
                         detail::as_number(sz[1], "$.image_size"));
  }
  const json& arr = detail::require(jdet, "detections", "$");
  if (!arr.is_array()) raise(Err::InputError, "$.detections: expected an array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "$.detections[" + std::to_string(i) + "]";
    detail::check_keys(arr[i], path, {"image_id", "board_id", "fiducial_id", "u", "v"});
    Correspondence c;
    c.image_id = detail::as_int(detail::require(arr[i], "image_id", path), path);
    c.board_id = detail::as_int(detail::require(arr[i], "board_id", path), path);
    c.fiducial_id = detail::as_int(detail::require(arr[i], "fiducial_id", path), path);
    c.u.x() = detail::as_number(detail::require(arr[i], "u", path), path + ".u");
    c.u.y() = detail::as_number(detail::require(arr[i], "v", path), path + ".v");
    ds.correspondences.push_back(c);
  }
  // Attach the board-plane point of every detection.
  for (Correspondence& c : ds.correspondences) {
    const Board* b = ds.board(c.board_id);
    if (b)
      for (const Fiducial& f : b->fiducials)
        if (f.id == c.fiducial_id) c.X = f.xy;
  }
  ds.normalize();
  validate_dataset(ds);
  return ds;
}

inline Dataset load_dataset(const std::string& boards_path, const std::string& detections_path) {
  const std::vector<Board> boards = boards_from_json(detail::parse_file(boards_path));
  return dataset_from_json(detail::parse_file(detections_path), boards);
}

// --- Config -------------------------------------------------------------------

inline json config_to_json(const RansacConfig& cfg) {
  json j;
  j["iterations"] = cfg.iterations;
  j["sample_size"] = cfg.sample_size;
  j["huber_scale"] = cfg.huber_scale;
  j["aspect_samples"] = cfg.aspect_samples;
  j["division_degree"] = cfg.division_degree;
  j["profile_radius_scale"] = cfg.profile_radius_scale;
  j["max_p3p_triples"] = cfg.max_p3p_triples;
  return j;
}

inline RansacConfig config_from_json(const json& j, const std::string& path = "$") {
  detail::check_keys(j, path,
                     {"iterations", "sample_size", "huber_scale", "aspect_samples",
                      "division_degree", "profile_radius_scale", "max_p3p_triples"});
  RansacConfig cfg;
  if (j.contains("iterations")) cfg.iterations = detail::as_int(j["iterations"], path);
  if (j.contains("sample_size")) cfg.sample_size = detail::as_int(j["sample_size"], path);
  if (j.contains("huber_scale")) cfg.huber_scale = detail::as_number(j["huber_scale"], path);
  if (j.contains("aspect_samples")) {
    cfg.aspect_samples.clear();
    for (const json& v : j["aspect_samples"])
      cfg.aspect_samples.push_back(detail::as_number(v, path + ".aspect_samples"));
  }
  if (j.contains("division_degree"))
    cfg.division_degree = detail::as_int(j["division_degree"], path);
  if (j.contains("profile_radius_scale"))
    cfg.profile_radius_scale = detail::as_number(j["profile_radius_scale"], path);
  if (j.contains("max_p3p_triples"))
    cfg.max_p3p_triples = detail::as_int(j["max_p3p_triples"], path);
  cfg.validate();
  return cfg;
}

// --- Calibration report ---------------------------------------------------------

inline json pose_to_json(const Pose& p) {
  const Vec3 aa = axis_angle_from_rotation(p.R);
  return {{"axis_angle", {aa.x(), aa.y(), aa.z()}}, {"t", {p.t.x(), p.t.y(), p.t.z()}}};
}

inline Pose pose_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"axis_angle", "t"});
  const VecX aa = detail::vec_from_json(detail::require(j, "axis_angle", path), path);
  const VecX t = detail::vec_from_json(detail::require(j, "t", path), path);
  if (aa.size() != 3 || t.size() != 3) raise(Err::InputError, path + ": expected 3-vectors");
  Pose p;
  p.R = rotation_from_axis_angle(Vec3(aa[0], aa[1], aa[2]));
  p.t = Vec3(t[0], t[1], t[2]);
  return p;
}

inline json score_to_json(const Score& s) {
  json j;
  j["loss"] = s.loss;
  j["inlier_ratio"] = s.inlier_ratio;
  j["rms_weighted"] = s.rms_weighted;
  j["rms_inlier"] = s.rms_inlier;
  j["n_corrs"] = s.n_corrs;
  j["n_unprojectable"] = s.n_unprojectable;
  return j;
}

inline Score score_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"loss", "inlier_ratio", "rms_weighted", "rms_inlier",
                               "n_corrs", "n_unprojectable"});
  Score s;
  s.loss = detail::as_number(detail::require(j, "loss", path), path);
  s.inlier_ratio = detail::as_number(detail::require(j, "inlier_ratio", path), path);
  s.rms_weighted = detail::as_number(detail::require(j, "rms_weighted", path), path);
  s.rms_inlier = detail::as_number(detail::require(j, "rms_inlier", path), path);
  s.n_corrs = detail::as_int(detail::require(j, "n_corrs", path), path);
  s.n_unprojectable = detail::as_int(detail::require(j, "n_unprojectable", path), path);
  return s;
}

struct CalibrationReport {
  Calibration calib;
  Score score;
  RansacConfig config;
  std::uint64_t rng_seed = 0;
  std::string tool_version = kToolVersion;
};

inline json report_to_json(const CalibrationReport& rep) {
  json j;
  j["tool_version"] = rep.tool_version;
  j["rng_seed"] = rep.rng_seed;
  j["units"] = {{"board", "meters"}, {"detections", "pixels"}};
  j["config"] = config_to_json(rep.config);
  j["model"] = {{"kind", kind_name(rep.calib.model.kind)},
                {"params", detail::vec_to_json(rep.calib.model.params)},
                {"r_max", rep.calib.model.r_max}};
  j["intrinsics"] = {{"e", {rep.calib.intrinsics.e.x(), rep.calib.intrinsics.e.y()}},
                     {"a", rep.calib.intrinsics.a},
                     {"f", rep.calib.intrinsics.f}};
  j["back_projection"] = {{"lambdas", detail::vec_to_json(rep.calib.back_projection.coeffs)},
                          {"r_max", rep.calib.back_projection.r_max}};
  json cams = json::array();
  for (const auto& [id, pose] : rep.calib.camera_poses) {
    json p = pose_to_json(pose);
    p["image_id"] = id;
    cams.push_back(p);
  }
  j["camera_poses"] = cams;
  json brds = json::array();
  for (const auto& [id, pose] : rep.calib.board_poses) {
    json p = pose_to_json(pose);
    p["board_id"] = id;
    brds.push_back(p);
  }
  j["board_poses"] = brds;
  j["reference_board"] = rep.calib.reference_board;
  j["score"] = score_to_json(rep.score);
  return j;
}

inline CalibrationReport report_from_json(const json& j) {
  detail::check_keys(j, "$",
                     {"tool_version", "rng_seed", "units", "config", "model", "intrinsics",
                      "back_projection", "camera_poses", "board_poses", "reference_board",
                      "score", "conversion"});
  CalibrationReport rep;
  rep.tool_version = detail::require(j, "tool_version", "$").get<std::string>();
  rep.rng_seed = detail::require(j, "rng_seed", "$").get<std::uint64_t>();
  rep.config = config_from_json(detail::require(j, "config", "$"), "$.config");

  const json& jm = detail::require(j, "model", "$");
  detail::check_keys(jm, "$.model", {"kind", "params", "r_max"});
  const std::string kind_str = detail::require(jm, "kind", "$.model").get<std::string>();
  const auto kind = kind_from_name(kind_str);
  if (!kind) raise(Err::InputError, "$.model.kind: unknown model '" + kind_str + "'");
  rep.calib.model.kind = *kind;
  rep.calib.model.params =
      detail::vec_from_json(detail::require(jm, "params", "$.model"), "$.model.params");
  rep.calib.model.r_max = detail::as_number(detail::require(jm, "r_max", "$.model"), "$.model");

  const json& ji = detail::require(j, "intrinsics", "$");
  detail::check_keys(ji, "$.intrinsics", {"e", "a", "f"});
  const VecX e = detail::vec_from_json(detail::require(ji, "e", "$.intrinsics"), "$.intrinsics.e");
  if (e.size() != 2) raise(Err::InputError, "$.intrinsics.e: expected a 2-vector");
  rep.calib.intrinsics.e = Vec2(e[0], e[1]);
  rep.calib.intrinsics.a = detail::as_number(detail::require(ji, "a", "$.intrinsics"), "$");
  rep.calib.intrinsics.f = detail::as_number(detail::require(ji, "f", "$.intrinsics"), "$");

  const json& jb = detail::require(j, "back_projection", "$");
  detail::check_keys(jb, "$.back_projection", {"lambdas", "r_max"});
  rep.calib.back_projection.coeffs = detail::vec_from_json(
      detail::require(jb, "lambdas", "$.back_projection"), "$.back_projection.lambdas");
  rep.calib.back_projection.r_max =
      detail::as_number(detail::require(jb, "r_max", "$.back_projection"), "$");

  for (const json& p : detail::require(j, "camera_poses", "$")) {
    if (!p.contains("image_id")) raise(Err::InputError, "$.camera_poses[]: missing image_id");
    json q = p;
    const int id = detail::as_int(q["image_id"], "$.camera_poses[].image_id");
    q.erase("image_id");
    rep.calib.camera_poses[id] = pose_from_json(q, "$.camera_poses[]");
  }
  for (const json& p : detail::require(j, "board_poses", "$")) {
    if (!p.contains("board_id")) raise(Err::InputError, "$.board_poses[]: missing board_id");
    json q = p;
    const int id = detail::as_int(q["board_id"], "$.board_poses[].board_id");
    q.erase("board_id");
    rep.calib.board_poses[id] = pose_from_json(q, "$.board_poses[]");
  }
  rep.calib.reference_board = detail::as_int(detail::require(j, "reference_board", "$"), "$");
  rep.score = score_from_json(detail::require(j, "score", "$"), "$.score");
  return rep;
}

// --- Evaluation report -----------------------------------------------------------

inline json evaluation_to_json(const HoldoutResult& res) {
  json j;
  j["tool_version"] = kToolVersion;
  j["score"] = score_to_json(res.score);
  json per_image = json::array();
  for (const auto& [id, pose] : res.camera_poses) {
    json p = pose_to_json(pose);
    p["image_id"] = id;
    per_image.push_back(p);
  }
  j["per_image_poses"] = per_image;
  j["failed_images"] = res.failed_images;
  j["n_failures"] = res.failed_images.size();
  return j;
}

// --- CSV ---------------------------------------------------------------------

inline std::string residuals_csv(const std::vector<ResidualRecord>& records) {
  std::ostringstream out;
  out.precision(17);
  out << "image_id,board_id,fiducial_id,u,v,proj_u,proj_v,dx,dy,distance,inlier\n";
  for (const ResidualRecord& r : records) {
    out << r.image_id << ',' << r.board_id << ',' << r.fiducial_id << ',' << r.u.x() << ','
        << r.u.y() << ',' << r.projected.x() << ',' << r.projected.y() << ','
        << r.projected.x() - r.u.x() << ',' << r.projected.y() - r.u.y() << ','
        << r.distance << ',' << (r.inlier ? 1 : 0) << '\n';
  }
  return out.str();
}

inline std::string correction_study_csv(const std::vector<CorrectionStudyResult>& results) {
  std::ostringstream out;
  out.precision(17);
  out << "profile,sigma,"
         "center_med_orig,center_med_corr,center_iqr_orig,center_iqr_corr,"
         "rotation_med_orig,rotation_med_corr,rotation_iqr_orig,rotation_iqr_corr,"
         "translation_med_orig,translation_med_corr,translation_iqr_orig,translation_iqr_corr,"
         "rms_med_orig,rms_med_corr,rms_iqr_orig,rms_iqr_corr,"
         "failures_orig,failures_corr\n";
  for (const CorrectionStudyResult& res : results)
    for (const CorrectionStudyRow& r : res.rows)
      out << res.profile << ',' << r.sigma << ',' << r.median_original.center_err << ','
          << r.median_corrected.center_err << ',' << r.iqr_original.center_err << ','
          << r.iqr_corrected.center_err << ',' << r.median_original.rotation_err << ','
          << r.median_corrected.rotation_err << ',' << r.iqr_original.rotation_err << ','
          << r.iqr_corrected.rotation_err << ',' << r.median_original.translation_err << ','
          << r.median_corrected.translation_err << ',' << r.iqr_original.translation_err
          << ',' << r.iqr_corrected.translation_err << ',' << r.median_original.grid_rms
          << ',' << r.median_corrected.grid_rms << ',' << r.iqr_original.grid_rms << ','
          << r.iqr_corrected.grid_rms << ',' << r.failures_original << ','
          << r.failures_corrected << '\n';
  return out.str();
}

inline std::string degree_study_csv(const std::vector<DegreeStudyRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "preset,degree,initial_rms,initial_inlier_pct,refined_rms,refined_inlier_pct,failed\n";
  for (const DegreeStudyRow& r : rows)
    out << r.preset << ',' << r.degree << ',' << r.initial_rms << ',' << r.initial_inlier_pct
        << ',' << r.refined_rms << ',' << r.refined_inlier_pct << ',' << (r.failed ? 1 : 0)
        << '\n';
  return out.str();
}

// --- SVG ----------------------------------------------------------------------

/// Residual scatter of reprojected corners, one color per image, with the
/// inlier-threshold circle.
inline std::string svg_residual_scatter(const std::vector<ResidualRecord>& records,
                                        double tau) {
  const double size = 560, half = size / 2.0;
  double range = 3.0 * tau;
  for (const ResidualRecord& r : records)
    if (r.projectable) range = std::max(range, std::min(10.0 * tau, r.distance) * 1.05);
  const double scale = (half - 30.0) / range;

  std::set<int> images;
  for (const ResidualRecord& r : records) images.insert(r.image_id);
  std::map<int, int> color_index;
  for (int id : images) color_index.emplace(id, static_cast<int>(color_index.size()));
  const int n_colors = std::max<std::size_t>(1, images.size());

  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << size << "' height='" << size
      << "' viewBox='0 0 " << size << ' ' << size << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<line x1='0' y1='" << half << "' x2='" << size << "' y2='" << half
      << "' stroke='#ccc'/>\n";
  out << "<line x1='" << half << "' y1='0' x2='" << half << "' y2='" << size
      << "' stroke='#ccc'/>\n";
  out << "<circle cx='" << half << "' cy='" << half << "' r='" << tau * scale
      << "' fill='none' stroke='#888' stroke-dasharray='4 3'/>\n";
  for (const ResidualRecord& r : records) {
    if (!r.projectable) continue;
    const Vec2 d = r.projected - r.u;
    if (d.norm() > range) continue;
    const double hue = 360.0 * color_index[r.image_id] / n_colors;
    out << "<circle cx='" << half + d.x() * scale << "' cy='" << half + d.y() * scale
        << "' r='2' fill='hsl(" << hue << ",70%,45%)' fill-opacity='0.65'/>\n";
  }
  out << "<text x='8' y='16' font-family='sans-serif' font-size='12'>residuals [px], ring = "
      << tau << " px</text>\n";
  out << "<text x='8' y='32' font-family='sans-serif' font-size='12'>axis range: "
      << range << " px</text>\n";
  out << "</svg>\n";
  return out.str();
}

/// Refined-RMS vs division degree, one polyline per preset.
inline std::string svg_degree_chart(const std::vector<DegreeStudyRow>& rows) {
  std::vector<std::string> presets;
  double ymax = 1e-12;
  int dmax = 2;
  for (const DegreeStudyRow& r : rows) {
    if (std::find(presets.begin(), presets.end(), r.preset) == presets.end())
      presets.push_back(r.preset);
    if (std::isfinite(r.refined_rms)) ymax = std::max(ymax, r.refined_rms);
    dmax = std::max(dmax, r.degree);
  }
  const double wpx = 560, hpx = 360, pad = 48;
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << wpx << "' height='" << hpx
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  const auto X = [&](int d) { return pad + (wpx - pad - 16) * d / static_cast<double>(dmax); };
  const auto Y = [&](double v) { return hpx - pad + (pad + 24 - hpx) * v / ymax; };
  for (std::size_t p = 0; p < presets.size(); ++p) {
    const double hue = 360.0 * p / presets.size();
    out << "<polyline fill='none' stroke='hsl(" << hue << ",70%,40%)' stroke-width='1.5' points='";
    for (const DegreeStudyRow& r : rows)
      if (r.preset == presets[p] && std::isfinite(r.refined_rms))
        out << X(r.degree) << ',' << Y(r.refined_rms) << ' ';
    out << "'/>\n";
    out << "<text x='" << pad + 8 << "' y='" << 18 + 14 * p
        << "' font-family='sans-serif' font-size='11' fill='hsl(" << hue << ",70%,40%)'>"
        << presets[p] << "</text>\n";
  }
  out << "<line x1='" << pad << "' y1='" << hpx - pad << "' x2='" << wpx - 16 << "' y2='"
      << hpx - pad << "' stroke='#333'/>\n";
  out << "<text x='" << wpx / 2 << "' y='" << hpx - 12
      << "' font-family='sans-serif' font-size='11'>division degree (refined RMS [px], max "
      << ymax << ")</text>\n";
  out << "</svg>\n";
  return out.str();
}

/// Four-panel median-error chart of the corner-correction study.
inline std::string svg_correction_chart(const CorrectionStudyResult& res) {
  const double pw = 300, ph = 220, pad = 42;
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << 2 * pw << "' height='"
      << 2 * ph << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  const char* titles[4] = {"center error [px]", "rotation error [rad]",
                           "translation error [units]", "grid reprojection RMS [px]"};
  for (int panel = 0; panel < 4; ++panel) {
    const double ox = (panel % 2) * pw, oy = (panel / 2) * ph;
    const auto metric = [&](const CorrectionMetrics& m) {
      switch (panel) {
        case 0: return m.center_err;
        case 1: return m.rotation_err;
        case 2: return m.translation_err;
        default: return m.grid_rms;
      }
    };
    double ymax = 1e-12, xmax = 1e-12;
    for (const CorrectionStudyRow& r : res.rows) {
      if (std::isfinite(metric(r.median_original))) ymax = std::max(ymax, metric(r.median_original));
      if (std::isfinite(metric(r.median_corrected))) ymax = std::max(ymax, metric(r.median_corrected));
      xmax = std::max(xmax, r.sigma);
    }
    const auto X = [&](double s) { return ox + pad + (pw - pad - 12) * s / xmax; };
    const auto Y = [&](double v) { return oy + ph - pad + (pad + 18 - ph) * v / ymax; };
    for (int pass = 0; pass < 2; ++pass) {
      out << "<polyline fill='none' stroke='" << (pass ? "#d62728" : "#1f77b4")
          << "' stroke-width='1.5' points='";
      for (const CorrectionStudyRow& r : res.rows) {
        const double v = metric(pass ? r.median_corrected : r.median_original);
        if (std::isfinite(v)) out << X(r.sigma) << ',' << Y(v) << ' ';
      }
      out << "'/>\n";
    }
    out << "<text x='" << ox + pad << "' y='" << oy + 16
        << "' font-family='sans-serif' font-size='11'>" << titles[panel]
        << " (blue: original, red: corrected)</text>\n";
    out << "<line x1='" << ox + pad << "' y1='" << oy + ph - pad << "' x2='" << ox + pw - 12
        << "' y2='" << oy + ph - pad << "' stroke='#333'/>\n";
    out << "<line x1='" << ox + pad << "' y1='" << oy + ph - pad << "' x2='" << ox + pad
        << "' y2='" << oy + 18 << "' stroke='#333'/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace babelcalib
