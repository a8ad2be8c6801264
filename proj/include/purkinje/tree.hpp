#pragma once

#include <filesystem>
#include <span>

#include <nlohmann/json_fwd.hpp>

#include "purkinje/mesh.hpp"

namespace purkinje {

/// Growth constants shared by every branch of a tree.
struct TreeGrowthConfig {
  double branch_length = 8.0;     // l_b, mm
  int segments_per_branch = 8;    // N_s
  double repulsion = 0.1;         // w
  double branch_angle = 0.15;     // alpha_b, rad
  int generations = 20;
  Vec2 root_uv{0.0, 0.0};
  Vec2 initial_direction_uv{1.0, 0.0};
  /// A proposed node closer than this fraction of a segment to an existing node ends the branch.
  double collision_fraction = 0.1;

  double segment_length() const { return branch_length / segments_per_branch; }
  void validate() const;
};

/// Per-ventricle geometric parameters inferred from the ECG.
struct VentricleParams {
  double initial_length = 50.0;              // mm
  std::array<double, 2> fascicle_lengths{20.0, 20.0};  // mm
  std::array<double, 2> fascicle_angles{0.5, 1.5};     // rad, counter-clockwise in uv
};

struct PurkinjeTree {
  std::vector<Vec3> nodes;
  std::vector<Vec2> uv;
  std::vector<std::array<int, 2>> edges;
  std::vector<double> edge_lengths;  // mm
  int root = 0;
  std::vector<int> pmjs;
  std::vector<int> branch_points;

  std::size_t num_nodes() const { return nodes.size(); }
  std::vector<std::vector<std::pair<int, double>>> adjacency() const;
  /// Throws NumericError if the tree-shape invariants do not hold.
  void validate() const;
};

/// Grows the fascicular tree in the flat disk of `fm` and maps every node to the surface.
PurkinjeTree grow_tree(const FlatMap& fm, const SurfaceMesh& mesh, const TreeGrowthConfig& cfg,
                       const VentricleParams& vp);

/// Unit vector pointing away from the point of `points` closest to x (the gradient of the
/// distance-to-closest-point function). Zero when `points` is empty or the nearest distance
/// is below 1e-12.
Vec2 closest_point_gradient(std::span<const Vec2> points, const Vec2& x);

/// True when a proposed node leaves the mapped domain and the branch must stop.
bool clip_to_domain(const Vec2& proposed, const UvLocator& locator);

/// Uniform bucket grid over [-1, 1]^2 for nearest-node queries during growth.
class PointGrid {
 public:
  explicit PointGrid(double cell_size);

  void insert(const Vec2& p, int owner, int index);
  /// Nearest stored point, skipping entries for which skip(owner, index) is true.
  /// Returns index -1 when nothing qualifies.
  template <typename Skip>
  std::pair<int, double> nearest(const Vec2& x, Skip&& skip) const;

 private:
  struct Entry {
    Vec2 p;
    int owner;
    int index;
  };
  int cell_of(double c) const;
  double cell_size_;
  int cells_;
  std::vector<std::vector<Entry>> buckets_;
  std::size_t count_ = 0;
};

nlohmann::json to_json(const PurkinjeTree& tree);
PurkinjeTree tree_from_json(const nlohmann::json& j);
void save_tree(const PurkinjeTree& tree, const std::filesystem::path& path);
PurkinjeTree load_tree(const std::filesystem::path& path);
/// Polyline OBJ ("v" + "l" records) for viewers.
void save_tree_obj(const PurkinjeTree& tree, const std::filesystem::path& path);

// --- template implementation ---

template <typename Skip>
std::pair<int, double> PointGrid::nearest(const Vec2& x, Skip&& skip) const {
  int best = -1;
  double best_d2 = kInf;
  if (count_ == 0) return {best, kInf};
  const int cx = cell_of(x.x()), cy = cell_of(x.y());
  for (int ring = 0; ring < cells_; ++ring) {
    // Every cell of ring r is at least (r - 1) cells away from x.
    double ring_min = (ring - 1) * cell_size_;
    if (best >= 0 && ring_min > 0 && ring_min * ring_min > best_d2) break;
    auto visit = [&](int i, int j) {
      if (i < 0 || i >= cells_ || j < 0 || j >= cells_) return;
      for (const auto& e : buckets_[static_cast<std::size_t>(i) * cells_ + j]) {
        if (skip(e.owner, e.index)) continue;
        double d2 = (e.p - x).squaredNorm();
        if (d2 < best_d2) best_d2 = d2, best = e.index;
      }
    };
    if (ring == 0) {
      visit(cx, cy);
      continue;
    }
    for (int k = -ring; k <= ring; ++k) {
      visit(cx + k, cy - ring);
      visit(cx + k, cy + ring);
    }
    for (int k = -ring + 1; k <= ring - 1; ++k) {
      visit(cx - ring, cy + k);
      visit(cx + ring, cy + k);
    }
  }
  return {best, std::sqrt(best_d2)};
}

}  // namespace purkinje
