#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "babelcalib/types.hpp"

namespace babelcalib {

struct Fiducial {
  int id = 0;
  Vec2 xy = Vec2::Zero();  // board-plane coordinates, z = 0 implicit
};

struct Board {
  int id = 0;
  std::vector<Fiducial> fiducials;
};

/// One detected corner matched to a board fiducial.
struct Correspondence {
  int image_id = 0;
  int board_id = 0;
  int fiducial_id = 0;
  Vec2 u = Vec2::Zero();  // detected pixel
  Vec2 X = Vec2::Zero();  // board-plane point
};

/// Boards plus indexed correspondences. Correspondences are kept sorted by
/// (image, board, fiducial) so sampling depends on IDs, not input order.
struct Dataset {
  std::vector<Board> boards;
  std::vector<Correspondence> correspondences;
  std::optional<Vec2> image_size;

  void normalize() {
    std::sort(boards.begin(), boards.end(),
              [](const Board& a, const Board& b) { return a.id < b.id; });
    std::sort(correspondences.begin(), correspondences.end(),
              [](const Correspondence& a, const Correspondence& b) {
                return std::tie(a.image_id, a.board_id, a.fiducial_id) <
                       std::tie(b.image_id, b.board_id, b.fiducial_id);
              });
    index_.clear();
    for (std::size_t i = 0; i < correspondences.size(); ++i) {
      const Correspondence& c = correspondences[i];
      auto& range = index_[c.image_id][c.board_id];
      if (range.second == 0) range.first = i;
      range.second = i + 1 - range.first;
      if (index_[c.image_id].size() == 1 && range.first + range.second != i + 1)
        raise(Err::InputError, "correspondences not contiguous after sort");
    }
  }

  std::span<const Correspondence> corrs(int image_id, int board_id) const {
    const auto im = index_.find(image_id);
    if (im == index_.end()) return {};
    const auto bd = im->second.find(board_id);
    if (bd == im->second.end()) return {};
    return {correspondences.data() + bd->second.first, bd->second.second};
  }

  const std::map<int, std::map<int, std::pair<std::size_t, std::size_t>>>& index() const {
    return index_;
  }

  std::vector<int> image_ids() const {
    std::vector<int> ids;
    for (const auto& [k, _] : index_) ids.push_back(k);
    return ids;
  }

  std::vector<int> board_ids() const {
    std::vector<int> ids;
    for (const Board& b : boards) ids.push_back(b.id);
    return ids;
  }

  const Board* board(int id) const {
    for (const Board& b : boards)
      if (b.id == id) return &b;
    return nullptr;
  }

  /// Board with the most correspondences; used as the pose reference.
  int most_observed_board() const {
    std::map<int, std::size_t> counts;
    for (const Correspondence& c : correspondences) ++counts[c.board_id];
    int best = -1;
    std::size_t best_n = 0;
    for (const auto& [id, n] : counts)
      if (n > best_n) best = id, best_n = n;
    return best;
  }

 private:
  std::map<int, std::map<int, std::pair<std::size_t, std::size_t>>> index_;
};

/// Dataset-level validation mirroring the file-format invariants.
inline void validate_dataset(const Dataset& ds) {
  std::map<int, const Board*> by_id;
  for (const Board& b : ds.boards) {
    if (!by_id.emplace(b.id, &b).second)
      raise(Err::InputError, "duplicate board_id " + std::to_string(b.id));
    if (b.fiducials.size() < 4)
      raise(Err::InputError, "board " + std::to_string(b.id) + " has fewer than 4 fiducials");
    std::map<int, Vec2> fids;
    for (const Fiducial& f : b.fiducials)
      if (!fids.emplace(f.id, f.xy).second)
        raise(Err::InputError, "duplicate fiducial_id " + std::to_string(f.id) +
                                   " on board " + std::to_string(b.id));
    // collinearity: all fiducials on one line
    bool collinear = true;
    const Vec2 p0 = b.fiducials.front().xy;
    Vec2 dir = Vec2::Zero();
    for (const Fiducial& f : b.fiducials) {
      const Vec2 d = f.xy - p0;
      if (dir.isZero() && d.norm() > 0) dir = d.normalized();
      if (!dir.isZero() && std::abs(d.x() * dir.y() - d.y() * dir.x()) > 1e-9 * (1.0 + d.norm()))
        collinear = false;
    }
    if (collinear)
      raise(Err::InputError, "board " + std::to_string(b.id) + " fiducials are collinear");
  }
  const Correspondence* prev = nullptr;
  for (const Correspondence& c : ds.correspondences) {
    const auto it = by_id.find(c.board_id);
    if (it == by_id.end())
      raise(Err::InputError, "detection references unknown board_id " + std::to_string(c.board_id));
    bool found = false;
    for (const Fiducial& f : it->second->fiducials)
      if (f.id == c.fiducial_id) found = true;
    if (!found)
      raise(Err::InputError, "detection references unknown fiducial_id " +
                                 std::to_string(c.fiducial_id) + " on board " +
                                 std::to_string(c.board_id));
    if (prev && prev->image_id == c.image_id && prev->board_id == c.board_id &&
        prev->fiducial_id == c.fiducial_id)
      raise(Err::InputError, "duplicate detection (image " + std::to_string(c.image_id) +
                                 ", board " + std::to_string(c.board_id) + ", fiducial " +
                                 std::to_string(c.fiducial_id) + ")");
    prev = &c;
  }
}

/// Largest aspect-corrected pixel radius about e among the detections;
/// fallback field-of-view bound when the image size is unknown.
inline double max_observed_radius_px(const Dataset& ds, const Vec2& e, double aspect) {
  double r = 0.0;
  for (const Correspondence& c : ds.correspondences)
    r = std::max(r, std::hypot((c.u.x() - e.x()) / aspect, c.u.y() - e.y()));
  return r;
}

}  // namespace babelcalib
