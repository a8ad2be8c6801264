#include "purkinje/activation.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

namespace purkinje {

// --- conductivity ----------------------------------------------------------

void ConductivityModel::validate() const {
  for (double s : {sigma_il, sigma_el, sigma_it, sigma_et})
    if (!(s > 0.0)) throw InputError("conductivities must be positive");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InputError("alpha must lie in (0, 1]");
  if (!(velocity_gain > 0.0)) throw InputError("velocity gain must be positive");
}

Mat3 ConductivityModel::intracellular(const Vec3& f) const {
  return sigma_it * Mat3::Identity() + (sigma_il - sigma_it) * f * f.transpose();
}

Mat3 ConductivityModel::extracellular(const Vec3& f) const {
  return sigma_et * Mat3::Identity() + (sigma_el - sigma_et) * f * f.transpose();
}

Mat3 monodomain_tensor(const ConductivityModel& cm, const Vec3& fiber) {
  if (std::abs(fiber.norm() - 1.0) > 1e-9) throw InputError("fiber direction must be a unit vector");
  const Mat3 gi = cm.intracellular(fiber), ge = cm.extracellular(fiber);
  Mat3 d = cm.alpha * cm.alpha * gi * (gi + ge).inverse() * ge;
  return 0.5 * (d + d.transpose());
}

Mat3 tensor_from_fibers(const ConductivityModel& cm, const Vec3& fiber) {
  return cm.velocity_gain * monodomain_tensor(cm, fiber);
}

std::vector<Mat3> tensor_field(const ConductivityModel& cm, const VolumeMesh& vm) {
  cm.validate();
  std::vector<Mat3> D;
  D.reserve(vm.num_tets());
  for (const auto& f : vm.fibers()) D.push_back(tensor_from_fibers(cm, f));
  return D;
}

// --- tree ------------------------------------------------------------------

std::vector<double> solve_tree(const PurkinjeTree& tree, double cv, std::span<const TreeSource> sources) {
  if (!(cv > 0.0)) throw InputError("Purkinje conduction velocity must be positive");
  if (sources.empty()) throw InputError("tree solve needs at least one source");
  const auto adj = tree.adjacency();
  std::vector<double> tau(tree.num_nodes(), kInf);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  for (const auto& s : sources) {
    if (s.node < 0 || s.node >= static_cast<int>(tau.size())) throw InputError("tree source node out of range");
    if (s.time < tau[s.node]) {
      tau[s.node] = s.time;
      heap.emplace(s.time, s.node);
    }
  }
  while (!heap.empty()) {
    auto [t, v] = heap.top();
    heap.pop();
    if (t > tau[v]) continue;
    for (auto [w, len] : adj[v]) {
      double nt = t + len / cv;
      if (nt < tau[w]) {
        tau[w] = nt;
        heap.emplace(nt, w);
      }
    }
  }
  return tau;
}

// --- myocardium --------------------------------------------------------------

namespace {

// Minimises tau0 + delta . lambda + ||w - E lambda||_M over lambda in the unit
// k-simplex interior. Returns +inf when the stationary point is not admissible
// (the boundary cases are handled by the lower-dimensional calls).
template <int K>
double simplex_update(double tau0, const Eigen::Matrix<double, 3, K>& E, const Eigen::Matrix<double, K, 1>& delta,
                      const Vec3& w, const Mat3& M) {
  using MatK = Eigen::Matrix<double, K, K>;
  using VecK = Eigen::Matrix<double, K, 1>;
  const MatK A = E.transpose() * M * E;
  const VecK b = E.transpose() * M * w;
  const double C = w.dot(M * w);
  Eigen::LDLT<MatK> ldlt(A);
  if (ldlt.info() != Eigen::Success) return kInf;
  const VecK lambda0 = ldlt.solve(b);
  const VecK Ainv_delta = ldlt.solve(delta);
  const double kappa = delta.dot(Ainv_delta);
  if (!(kappa < 1.0)) return kInf;
  const double qmin = std::max(C - b.dot(lambda0), 0.0);
  const double q = qmin / (1.0 - kappa);
  const VecK lambda = lambda0 - Ainv_delta * std::sqrt(q);
  constexpr double eps = 1e-12;
  if (lambda.minCoeff() < -eps || lambda.sum() > 1.0 + eps) return kInf;
  return tau0 + delta.dot(lambda) + std::sqrt(q);
}

}  // namespace

void EikonalOptions::validate() const {
  if (!(source_radius >= 0.0)) throw InputError("eikonal source radius must be non-negative");
}

MyocardiumSolver::MyocardiumSolver(const VolumeMesh& vm, std::vector<Mat3> D, const EikonalOptions& opt)
    : vm_(&vm), D_(std::move(D)), opt_(opt) {
  opt_.validate();
  if (D_.size() != vm.num_tets()) throw InputError("one conductivity tensor per tet is required");
  Dinv_.reserve(D_.size());
  for (const auto& d : D_) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(d);
    if (es.eigenvalues().minCoeff() <= 0.0) throw NumericError("conductivity tensor is not positive definite");
    Dinv_.push_back(d.inverse());
  }
  vertex_metric_.assign(vm.num_vertices(), Mat3::Zero());
  for (std::size_t v = 0; v < vm.num_vertices(); ++v) {
    for (int t : vm.vertex_tets()[v]) vertex_metric_[v] += D_[t];
    if (!vm.vertex_tets()[v].empty()) vertex_metric_[v] = vertex_metric_[v].inverse().eval() * vm.vertex_tets()[v].size();
  }
  build_stencil();

  // Bucket grid sized for ~1 element per cell on average.
  const Vec3 lo = vm.bbox_min(), hi = vm.bbox_max();
  const Vec3 ext = (hi - lo).cwiseMax(Vec3::Constant(1e-9));
  grid_cell_ = std::cbrt(ext.prod() / std::max<std::size_t>(vm.num_tets(), 1)) * 1.5;
  for (int k = 0; k < 3; ++k) grid_dims_[k] = std::max(1, static_cast<int>(std::ceil(ext[k] / grid_cell_)));
  grid_origin_ = lo;
  grid_.assign(static_cast<std::size_t>(grid_dims_[0]) * grid_dims_[1] * grid_dims_[2], {});
  for (std::size_t t = 0; t < vm.num_tets(); ++t) {
    Vec3 tlo = vm.vertices()[vm.tets()[t][0]], thi = tlo;
    for (int v : vm.tets()[t]) tlo = tlo.cwiseMin(vm.vertices()[v]), thi = thi.cwiseMax(vm.vertices()[v]);
    std::array<int, 3> a{}, b{};
    for (int k = 0; k < 3; ++k) {
      a[k] = std::clamp(static_cast<int>(std::floor((tlo[k] - lo[k]) / grid_cell_)), 0, grid_dims_[k] - 1);
      b[k] = std::clamp(static_cast<int>(std::floor((thi[k] - lo[k]) / grid_cell_)), 0, grid_dims_[k] - 1);
    }
    for (int i = a[0]; i <= b[0]; ++i)
      for (int j = a[1]; j <= b[1]; ++j)
        for (int k = a[2]; k <= b[2]; ++k)
          grid_[(static_cast<std::size_t>(i) * grid_dims_[1] + j) * grid_dims_[2] + k].push_back(static_cast<int>(t));
  }
}

void MyocardiumSolver::build_stencil() {
  const std::size_t nv = vm_->num_vertices();
  const auto& vtets = vm_->vertex_tets();
  const auto& tets = vm_->tets();
  std::vector<int> local;
  std::vector<std::pair<std::array<int, 3>, int>> cand;
  std::vector<int> owner;  // target vertex of each face
  for (std::size_t n = 0; n < nv; ++n) {
    local.assign(vtets[n].begin(), vtets[n].end());
    if (opt_.stencil == Stencil::TwoRing)
      for (int m : vm_->vertex_neighbors()[n]) local.insert(local.end(), vtets[m].begin(), vtets[m].end());
    cand.clear();
    for (int t : local)
      for (int skip = 0; skip < 4; ++skip) {
        std::array<int, 3> f{};
        int k = 0;
        for (int j = 0; j < 4; ++j)
          if (j != skip) f[k++] = tets[t][j];
        if (f[0] == static_cast<int>(n) || f[1] == static_cast<int>(n) || f[2] == static_cast<int>(n)) continue;
        std::sort(f.begin(), f.end());
        cand.emplace_back(f, t);
      }
    // Keep the first tet seen per face: tets incident to n come first.
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    cand.erase(std::unique(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first == b.first; }),
               cand.end());
    for (const auto& [f, t] : cand) {
      faces_.push_back({f, t});
      owner.push_back(static_cast<int>(n));
    }
  }
  watch_start_.assign(nv + 1, 0);
  for (const auto& f : faces_)
    for (int u : f.v) ++watch_start_[u + 1];
  for (std::size_t v = 0; v < nv; ++v) watch_start_[v + 1] += watch_start_[v];
  watch_.resize(watch_start_[nv]);
  std::vector<std::size_t> fill(watch_start_.begin(), watch_start_.end() - 1);
  for (std::size_t i = 0; i < faces_.size(); ++i)
    for (int u : faces_[i].v) watch_[fill[u]++] = {owner[i], static_cast<int>(i)};
}

double MyocardiumSolver::element_distance(int t, const Vec3& a, const Vec3& b) const {
  const Vec3 d = b - a;
  return std::sqrt(std::max(d.dot(Dinv_[t] * d), 0.0));
}

double MyocardiumSolver::face_update(int target, const StencilFace& f, int changed,
                                     std::span<const double> tau) const {
  const auto& X = vm_->vertices();
  const Mat3& M = Dinv_[f.tet];
  const Vec3 w = X[target] - X[changed];
  double best = tau[changed] + std::sqrt(std::max(w.dot(M * w), 0.0));
  std::array<int, 2> others{};
  int n = 0;
  for (int u : f.v)
    if (u != changed && std::isfinite(tau[u])) others[n++] = u;
  for (int i = 0; i < n; ++i) {
    Eigen::Matrix<double, 3, 1> E = X[others[i]] - X[changed];
    Eigen::Matrix<double, 1, 1> d(tau[others[i]] - tau[changed]);
    best = std::min(best, simplex_update<1>(tau[changed], E, d, w, M));
  }
  if (n == 2) {
    Eigen::Matrix<double, 3, 2> E;
    E.col(0) = X[others[0]] - X[changed];
    E.col(1) = X[others[1]] - X[changed];
    Eigen::Vector2d d(tau[others[0]] - tau[changed], tau[others[1]] - tau[changed]);
    best = std::min(best, simplex_update<2>(tau[changed], E, d, w, M));
  }
  return best;
}

std::vector<double> MyocardiumSolver::solve(std::span<const VertexSeed> seeds) const {
  if (seeds.empty()) throw InputError("myocardial solve needs at least one source");
  const std::size_t nv = vm_->num_vertices();
  const auto& X = vm_->vertices();
  const auto& nbrs = vm_->vertex_neighbors();
  std::vector<double> tau(nv, kInf);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> active;
  auto lower = [&](int v, double t) {
    if (t < tau[v]) {
      tau[v] = t;
      active.emplace(t, v);
    }
  };
  std::vector<int> ball, mark(nv, -1);
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const auto& s = seeds[k];
    if (s.vertex < 0 || static_cast<std::size_t>(s.vertex) >= nv) throw InputError("myocardial seed vertex out of range");
    lower(s.vertex, s.time);
    if (!(opt_.source_radius > 0.0)) continue;
    // Mesh-connected vertices inside the ball get the straight-line travel time.
    const Vec3& c = X[s.vertex];
    const Mat3& M = vertex_metric_[s.vertex];
    ball.assign(1, s.vertex);
    mark[s.vertex] = static_cast<int>(k);
    for (std::size_t i = 0; i < ball.size(); ++i)
      for (int u : nbrs[ball[i]]) {
        if (mark[u] == static_cast<int>(k) || (X[u] - c).norm() > opt_.source_radius) continue;
        mark[u] = static_cast<int>(k);
        ball.push_back(u);
        const Vec3 d = X[u] - c;
        lower(u, s.time + std::sqrt(std::max(d.dot(M * d), 0.0)));
      }
  }
  while (!active.empty()) {
    auto [t, v] = active.top();
    active.pop();
    if (t > tau[v]) continue;
    for (std::size_t i = watch_start_[v]; i < watch_start_[v + 1]; ++i) {
      const auto [n, f] = watch_[i];
      const double q = face_update(n, faces_[f], v, tau);
      if (q < tau[n] - 1e-12 * (1.0 + std::abs(q))) {
        tau[n] = q;
        active.emplace(q, n);
      }
    }
  }
  return tau;
}

std::optional<PointLocation> MyocardiumSolver::locate(const Vec3& p, double snap_tolerance) const {
  const auto& X = vm_->vertices();
  const auto& T = vm_->tets();
  const Vec3 lo = p.array() - snap_tolerance, hi = p.array() + snap_tolerance;
  std::array<int, 3> a{}, b{};
  for (int k = 0; k < 3; ++k) {
    a[k] = static_cast<int>(std::floor((lo[k] - grid_origin_[k]) / grid_cell_));
    b[k] = static_cast<int>(std::floor((hi[k] - grid_origin_[k]) / grid_cell_));
    a[k] = std::max(a[k], 0);
    b[k] = std::min(b[k], grid_dims_[k] - 1);
    if (a[k] > b[k]) return std::nullopt;
  }
  std::vector<int> candidates;
  for (int i = a[0]; i <= b[0]; ++i)
    for (int j = a[1]; j <= b[1]; ++j)
      for (int k = a[2]; k <= b[2]; ++k)
        for (int t : grid_[(static_cast<std::size_t>(i) * grid_dims_[1] + j) * grid_dims_[2] + k]) candidates.push_back(t);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  int nearest = -1;
  double nearest_d = kInf;
  for (int t : candidates) {
    const auto& tet = T[t];
    Vec3 tlo = X[tet[0]], thi = tlo;
    for (int v : tet) tlo = tlo.cwiseMin(X[v]), thi = thi.cwiseMax(X[v]);
    if ((p.array() < tlo.array() - snap_tolerance).any() || (p.array() > thi.array() + snap_tolerance).any()) continue;
    Mat3 J;
    for (int c = 0; c < 3; ++c) J.col(c) = X[tet[c + 1]] - X[tet[0]];
    const Vec3 l = J.inverse() * (p - X[tet[0]]);
    const std::array<double, 4> bary{1.0 - l.sum(), l[0], l[1], l[2]};
    if (*std::min_element(bary.begin(), bary.end()) >= -1e-8) {
      PointLocation loc;
      loc.tet = t;
      loc.bary = bary;
      return loc;
    }
    for (int v : tet) {
      double d = (X[v] - p).norm();
      if (d < nearest_d) nearest_d = d, nearest = v;
    }
  }
  if (nearest < 0) return std::nullopt;
  PointLocation loc;
  loc.vertex = nearest;
  loc.snap_distance = nearest_d;
  return loc;
}

void MyocardiumSolver::seeds_for_point(const Vec3& p, const PointLocation& loc, double time,
                                       std::vector<VertexSeed>& out) const {
  if (!std::isfinite(time)) return;
  if (loc.tet < 0) {
    out.push_back({loc.vertex, time});
    return;
  }
  for (int v : vm_->tets()[loc.tet]) out.push_back({v, time + element_distance(loc.tet, p, vm_->vertices()[v])});
}

double MyocardiumSolver::arrival_at(const Vec3& p, std::span<const double> field, const PointLocation& loc) const {
  if (loc.tet < 0) return field[loc.vertex];
  double best = kInf;
  for (int v : vm_->tets()[loc.tet]) best = std::min(best, field[v] + element_distance(loc.tet, vm_->vertices()[v], p));
  return best;
}

std::vector<double> solve_myocardium(const VolumeMesh& vm, const std::vector<Mat3>& D, std::span<const VertexSeed> seeds,
                                     const EikonalOptions& opt) {
  return MyocardiumSolver(vm, D, opt).solve(seeds);
}

// --- coupling ----------------------------------------------------------------

void CouplingConfig::validate() const {
  if (!(cv_purkinje > 0.0)) throw InputError("Purkinje conduction velocity must be positive");
  if (!(tol > 0.0)) throw InputError("coupling tolerance must be positive");
  if (max_outer_iters < 1) throw InputError("max_outer_iters must be >= 1");
  for (double t : root_times)
    if (!std::isfinite(t)) throw InputError("root times must be finite");
}

std::array<double, 2> root_times_from_rt(double rt) { return {std::max(-rt, 0.0), std::max(rt, 0.0)}; }

std::vector<PointLocation> locate_pmjs(const MyocardiumSolver& solver, const PurkinjeTree& tree) {
  std::vector<PointLocation> out;
  out.reserve(tree.pmjs.size());
  for (int p : tree.pmjs) {
    auto loc = solver.locate(tree.nodes[p]);
    if (!loc) throw InputError("PMJ node " + std::to_string(p) + " lies outside the myocardial mesh");
    out.push_back(*loc);
  }
  return out;
}

namespace {

double max_abs_change(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isinf(a[i]) && std::isinf(b[i])) continue;
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace

ActivationField solve_coupled(const std::array<const PurkinjeTree*, 2>& trees, const MyocardiumSolver& solver,
                              const CouplingConfig& cc, const IterationObserver& observer) {
  cc.validate();
  std::array<std::vector<PointLocation>, 2> locs;
  ActivationField af;
  for (int s = 0; s < 2; ++s) {
    locs[s] = locate_pmjs(solver, *trees[s]);
    for (std::size_t k = 0; k < locs[s].size(); ++k)
      if (locs[s][k].tet < 0) af.snapped_pmjs.push_back(trees[s]->pmjs[k]);
    af.tau_tree[s].assign(trees[s]->num_nodes(), kInf);
  }
  af.tau_myo.assign(solver.mesh().num_vertices(), kInf);

  std::vector<TreeSource> tree_sources;
  std::vector<VertexSeed> seeds;
  for (int it = 1; it <= cc.max_outer_iters; ++it) {
    double change = 0.0;
    seeds.clear();
    for (int s = 0; s < 2; ++s) {
      const PurkinjeTree& tree = *trees[s];
      tree_sources.assign(1, {tree.root, cc.root_times[s]});
      for (std::size_t k = 0; k < tree.pmjs.size(); ++k) {
        double t = solver.arrival_at(tree.nodes[tree.pmjs[k]], af.tau_myo, locs[s][k]);
        if (std::isfinite(t)) tree_sources.push_back({tree.pmjs[k], t});
      }
      auto tau = solve_tree(tree, cc.cv_purkinje, tree_sources);
      change = std::max(change, max_abs_change(tau, af.tau_tree[s]));
      af.tau_tree[s] = std::move(tau);
      for (std::size_t k = 0; k < tree.pmjs.size(); ++k)
        solver.seeds_for_point(tree.nodes[tree.pmjs[k]], locs[s][k], af.tau_tree[s][tree.pmjs[k]], seeds);
    }
    auto tau_myo = solver.solve(seeds);
    change = std::max(change, max_abs_change(tau_myo, af.tau_myo));
    af.tau_myo = std::move(tau_myo);
    af.iterations = it;
    af.max_change.push_back(change);
    if (observer) observer(it, af);
    if (change < cc.tol) {
      af.converged = true;
      break;
    }
  }
  return af;
}

ActivationField solve_coupled(const PurkinjeTree& left, const PurkinjeTree& right, const VolumeMesh& vm,
                              const ConductivityModel& cm, const CouplingConfig& cc) {
  MyocardiumSolver solver(vm, tensor_field(cm, vm));
  return solve_coupled({&left, &right}, solver, cc);
}

// --- export ------------------------------------------------------------------

void save_activation_csv(std::span<const double> tau, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(17);
  out << "vertex_id,tau_ms\n";
  for (std::size_t i = 0; i < tau.size(); ++i) out << i << ',' << tau[i] << '\n';
}

void save_activation_vtk(const VolumeMesh& vm, std::span<const double> tau, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(10);
  out << "# vtk DataFile Version 3.0\nactivation times\nASCII\nDATASET UNSTRUCTURED_GRID\n";
  out << "POINTS " << vm.num_vertices() << " double\n";
  for (const auto& p : vm.vertices()) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  out << "CELLS " << vm.num_tets() << ' ' << 5 * vm.num_tets() << '\n';
  for (const auto& t : vm.tets()) out << "4 " << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
  out << "CELL_TYPES " << vm.num_tets() << '\n';
  for (std::size_t t = 0; t < vm.num_tets(); ++t) out << "10\n";
  out << "POINT_DATA " << tau.size() << "\nSCALARS activation_ms double 1\nLOOKUP_TABLE default\n";
  for (double v : tau) out << v << '\n';
}

}  // namespace purkinje
