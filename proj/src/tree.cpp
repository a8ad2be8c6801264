#include "purkinje/tree.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

namespace purkinje {

void TreeGrowthConfig::validate() const {
  if (!(branch_length > 0.0)) throw InputError("branch length must be positive");
  if (segments_per_branch < 1) throw InputError("segments per branch must be >= 1");
  if (!(repulsion >= 0.0)) throw InputError("repulsion must be non-negative");
  if (generations < 0) throw InputError("generations must be non-negative");
  if (!(collision_fraction >= 0.0)) throw InputError("collision fraction must be non-negative");
  if (!(initial_direction_uv.norm() > 0.0)) throw InputError("initial direction must be non-zero");
  if (!root_uv.allFinite() || root_uv.norm() > 1.0) throw InputError("root lies outside the unit disk");
}

std::vector<std::vector<std::pair<int, double>>> PurkinjeTree::adjacency() const {
  std::vector<std::vector<std::pair<int, double>>> adj(nodes.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    adj[edges[e][0]].emplace_back(edges[e][1], edge_lengths[e]);
    adj[edges[e][1]].emplace_back(edges[e][0], edge_lengths[e]);
  }
  return adj;
}

void PurkinjeTree::validate() const {
  const std::size_t n = nodes.size();
  if (n == 0) throw NumericError("empty tree");
  if (edges.size() != n - 1) throw NumericError("tree has |E| != |V| - 1");
  if (edge_lengths.size() != edges.size()) throw NumericError("edge length count mismatch");
  for (double l : edge_lengths)
    if (!(l > 0.0)) throw NumericError("non-positive edge length");
  auto adj = adjacency();
  std::vector<bool> seen(n, false);
  std::queue<int> q;
  q.push(root);
  seen[root] = true;
  std::size_t reached = 1;
  while (!q.empty()) {
    int v = q.front();
    q.pop();
    for (auto [w, len] : adj[v])
      if (!seen[w]) seen[w] = true, ++reached, q.push(w);
  }
  if (reached != n) throw NumericError("tree is not connected");
  for (int p : pmjs)
    if (adj[p].size() != 1) throw NumericError("PMJ " + std::to_string(p) + " does not have degree 1");
  for (int b : branch_points)
    if (adj[b].size() != 3) throw NumericError("branch point " + std::to_string(b) + " does not have degree 3");
}

// --- helpers ---------------------------------------------------------------

Vec2 closest_point_gradient(std::span<const Vec2> points, const Vec2& x) {
  double best = kInf;
  Vec2 cp = Vec2::Zero();
  for (const auto& p : points) {
    double d = (x - p).squaredNorm();
    if (d < best) best = d, cp = p;
  }
  if (!(best < kInf) || std::sqrt(best) < 1e-12) return Vec2::Zero();
  return (x - cp).normalized();
}

bool clip_to_domain(const Vec2& proposed, const UvLocator& locator) {
  if (!proposed.allFinite() || proposed.norm() > 1.0) return true;
  return !locator.locate(proposed).has_value();
}

PointGrid::PointGrid(double cell_size) {
  if (!(cell_size > 0.0)) throw InputError("point grid cell size must be positive");
  cells_ = std::clamp(static_cast<int>(std::ceil(2.0 / cell_size)), 1, 2048);
  cell_size_ = 2.0 / cells_;
  buckets_.resize(static_cast<std::size_t>(cells_) * cells_);
}

int PointGrid::cell_of(double c) const {
  return std::clamp(static_cast<int>(std::floor((c + 1.0) / cell_size_)), 0, cells_ - 1);
}

void PointGrid::insert(const Vec2& p, int owner, int index) {
  buckets_[static_cast<std::size_t>(cell_of(p.x())) * cells_ + cell_of(p.y())].push_back({p, owner, index});
  ++count_;
}

// --- growth ----------------------------------------------------------------

namespace {

Vec2 rotate(const Vec2& v, double a) {
  return Vec2(std::cos(a) * v.x() - std::sin(a) * v.y(), std::sin(a) * v.x() + std::cos(a) * v.y());
}

struct Branch {
  std::vector<int> nodes;  // nodes[0] is the start node (owned by the parent)
  Vec2 dir;
  int steps_total = 0;
  int steps_done = 0;
  double seg_len = 0.0;
  bool alive = true;

  bool finished() const { return !alive || steps_done == steps_total; }
};

class Grower {
 public:
  Grower(const FlatMap& fm, const SurfaceMesh& mesh, const TreeGrowthConfig& cfg)
      : locator_(fm, mesh), cfg_(cfg), grid_(grid_cell(fm, cfg)) {}

  void add_root(const Vec2& u) {
    auto sp = locator_.locate(u);
    if (!sp) throw InputError("root does not map onto the surface");
    add_node(u, sp->position, -1);
  }

  int start_branch(int start_node, const Vec2& dir, double length) {
    Branch b;
    b.nodes.push_back(start_node);
    b.dir = dir.normalized();
    b.steps_total = std::max(1, static_cast<int>(std::lround(length / cfg_.segment_length())));
    b.seg_len = length / b.steps_total;
    branches_.push_back(std::move(b));
    return static_cast<int>(branches_.size()) - 1;
  }

  // Advances all listed branches one segment at a time until each has finished.
  void grow_lockstep(const std::vector<int>& ids) {
    bool any = true;
    while (any) {
      any = false;
      for (int id : ids)
        if (!branches_[id].finished()) {
          step(id);
          any = true;
        }
    }
  }

  const Branch& branch(int id) const { return branches_[id]; }

  PurkinjeTree finish() {
    tree_.root = 0;
    std::vector<int> degree(tree_.nodes.size(), 0);
    for (const auto& e : tree_.edges) ++degree[e[0]], ++degree[e[1]];
    for (std::size_t v = 1; v < degree.size(); ++v) {
      if (degree[v] == 1) tree_.pmjs.push_back(static_cast<int>(v));
      if (degree[v] == 3) tree_.branch_points.push_back(static_cast<int>(v));
    }
    tree_.validate();
    return std::move(tree_);
  }

 private:
  static double grid_cell(const FlatMap& fm, const TreeGrowthConfig& cfg) {
    std::vector<double> s = fm.scale;
    std::nth_element(s.begin(), s.begin() + s.size() / 2, s.end());
    return cfg.segment_length() / s[s.size() / 2];
  }

  int add_node(const Vec2& u, const Vec3& p, int owner) {
    int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back(p);
    tree_.uv.push_back(u);
    pos_in_branch_.push_back(owner >= 0 ? static_cast<int>(branches_[owner].nodes.size()) : 0);
    grid_.insert(u, owner, id);
    return id;
  }

  void step(int id) {
    Branch& b = branches_[id];
    const int tip = b.nodes.back();
    const Vec2 x = tree_.uv[tip];
    const int window = cfg_.segments_per_branch;
    const int len = static_cast<int>(b.nodes.size());
    auto skip = [&](int owner, int index) { return owner == id && pos_in_branch_[index] >= len - window; };

    Vec2 d = b.dir;
    if (b.steps_done > 0 && cfg_.repulsion > 0.0) {
      auto [cp, dist] = grid_.nearest(x, skip);
      if (cp >= 0 && dist >= 1e-12) {
        Vec2 grad = (x - tree_.uv[cp]) / dist;
        Vec2 nd = d + cfg_.repulsion * grad;
        if (nd.norm() > 0.0) d = nd.normalized();
      }
    }
    const double s = *locator_.scale_at(x);
    const Vec2 next = x + (b.seg_len / s) * d;
    if (clip_to_domain(next, locator_)) {
      b.alive = false;
      return;
    }
    auto [cp, dist] = grid_.nearest(next, skip);
    if (cp >= 0 && dist < cfg_.collision_fraction * cfg_.segment_length() / s) {
      b.alive = false;
      return;
    }
    auto sp = locator_.locate(next);
    int node = add_node(next, sp->position, id);
    double length = (tree_.nodes[node] - tree_.nodes[tip]).norm();
    if (!(length > 0.0)) throw NumericError("zero-length tree segment");
    tree_.edges.push_back({tip, node});
    tree_.edge_lengths.push_back(length);
    b.nodes.push_back(node);
    b.dir = d;
    ++b.steps_done;
  }

  UvLocator locator_;
  const TreeGrowthConfig& cfg_;
  PointGrid grid_;
  PurkinjeTree tree_;
  std::vector<Branch> branches_;
  std::vector<int> pos_in_branch_;
};

}  // namespace

PurkinjeTree grow_tree(const FlatMap& fm, const SurfaceMesh& mesh, const TreeGrowthConfig& cfg,
                       const VentricleParams& vp) {
  cfg.validate();
  if (!(vp.initial_length > 0.0) || !(vp.fascicle_lengths[0] > 0.0) || !(vp.fascicle_lengths[1] > 0.0))
    throw InputError("initial and fascicle lengths must be positive");

  Grower g(fm, mesh, cfg);
  g.add_root(cfg.root_uv);
  int initial = g.start_branch(0, cfg.initial_direction_uv, vp.initial_length);
  g.grow_lockstep({initial});
  if (g.branch(initial).steps_done == 0) throw NumericError("tree growth blocked: initial branch cannot advance");

  const Branch& ib = g.branch(initial);
  const int fork = ib.nodes.back();
  const Vec2 last_dir = ib.dir;
  std::vector<int> active;
  for (int k = 0; k < 2; ++k)
    active.push_back(g.start_branch(fork, rotate(last_dir, vp.fascicle_angles[k]), vp.fascicle_lengths[k]));
  g.grow_lockstep(active);

  for (int gen = 0; gen < cfg.generations; ++gen) {
    std::vector<int> children;
    for (int parent : active) {
      const Branch& p = g.branch(parent);
      if (!p.alive || p.steps_done == 0) continue;
      int tip = p.nodes.back();
      Vec2 dir = p.dir;
      for (double sign : {1.0, -1.0})
        children.push_back(g.start_branch(tip, rotate(dir, sign * cfg.branch_angle), cfg.branch_length));
    }
    if (children.empty()) break;
    g.grow_lockstep(children);
    active = std::move(children);
  }
  return g.finish();
}

// --- serialization -----------------------------------------------------------

nlohmann::json to_json(const PurkinjeTree& tree) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const auto& p : tree.nodes) j["nodes"].push_back({p.x(), p.y(), p.z()});
  j["uv"] = nlohmann::json::array();
  for (const auto& u : tree.uv) j["uv"].push_back({u.x(), u.y()});
  j["edges"] = tree.edges;
  j["edge_lengths"] = tree.edge_lengths;
  j["root"] = tree.root;
  j["pmjs"] = tree.pmjs;
  j["branch_points"] = tree.branch_points;
  return j;
}

PurkinjeTree tree_from_json(const nlohmann::json& j) {
  PurkinjeTree t;
  for (const auto& p : j.at("nodes")) t.nodes.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
  if (j.contains("uv"))
    for (const auto& u : j.at("uv")) t.uv.emplace_back(u.at(0).get<double>(), u.at(1).get<double>());
  t.edges = j.at("edges").get<std::vector<std::array<int, 2>>>();
  for (const auto& e : t.edges)
    for (int v : e)
      if (v < 0 || v >= static_cast<int>(t.nodes.size())) throw InputError("tree edge references missing node");
  if (j.contains("edge_lengths")) {
    t.edge_lengths = j.at("edge_lengths").get<std::vector<double>>();
  } else {
    for (const auto& e : t.edges) t.edge_lengths.push_back((t.nodes[e[0]] - t.nodes[e[1]]).norm());
  }
  t.root = j.at("root").get<int>();
  t.pmjs = j.at("pmjs").get<std::vector<int>>();
  if (j.contains("branch_points")) t.branch_points = j.at("branch_points").get<std::vector<int>>();
  return t;
}

void save_tree(const PurkinjeTree& tree, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << to_json(tree).dump();
}

PurkinjeTree load_tree(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return tree_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void save_tree_obj(const PurkinjeTree& tree, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(10);
  for (const auto& p : tree.nodes) out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& e : tree.edges) out << "l " << e[0] + 1 << ' ' << e[1] + 1 << '\n';
}

}  // namespace purkinje
