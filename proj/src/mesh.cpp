#include "purkinje/mesh.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>
#include <unordered_map>

namespace purkinje {

namespace {

std::uint64_t edge_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

double signed_area_2d(const Vec2& a, const Vec2& b, const Vec2& c) {
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()));
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return in;
}

}  // namespace

// --- SurfaceMesh ---------------------------------------------------------

SurfaceMesh::SurfaceMesh(std::vector<Vec3> vertices, std::vector<std::array<int, 3>> triangles)
    : vertices_(std::move(vertices)), triangles_(std::move(triangles)) {
  const int nv = static_cast<int>(vertices_.size());
  if (triangles_.empty()) throw InputError("surface has no triangles");
  for (const auto& t : triangles_) {
    for (int v : t)
      if (v < 0 || v >= nv) throw InputError("triangle references vertex " + std::to_string(v) + " out of range");
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) throw InputError("triangle with repeated vertex");
  }

  // Half-edge bookkeeping: each directed edge may appear once; a boundary
  // half-edge is one whose reverse is absent.
  std::unordered_map<std::uint64_t, int> half_edges;
  half_edges.reserve(triangles_.size() * 3);
  for (std::size_t f = 0; f < triangles_.size(); ++f) {
    const auto& t = triangles_[f];
    for (int k = 0; k < 3; ++k) {
      int a = t[k], b = t[(k + 1) % 3];
      if (!half_edges.emplace(edge_key(a, b), static_cast<int>(f)).second)
        throw InputError("non-manifold or inconsistently oriented surface at edge " + std::to_string(a) + "-" +
                         std::to_string(b));
    }
  }

  std::vector<int> next_on_boundary(nv, -1);
  std::size_t boundary_edges = 0;
  for (const auto& [key, f] : half_edges) {
    int a = static_cast<int>(key >> 32), b = static_cast<int>(key & 0xffffffffu);
    if (half_edges.count(edge_key(b, a))) continue;
    if (next_on_boundary[a] != -1) throw InputError("non-manifold boundary vertex " + std::to_string(a));
    next_on_boundary[a] = b;
    ++boundary_edges;
  }
  if (boundary_edges == 0) throw InputError("surface has no boundary loop");

  int start = -1;
  for (int v = 0; v < nv; ++v)
    if (next_on_boundary[v] != -1) {
      start = v;
      break;
    }
  is_boundary_.assign(nv, false);
  for (int v = start; boundary_loop_.empty() || v != start; v = next_on_boundary[v]) {
    if (v == -1 || is_boundary_[v]) throw InputError("broken boundary loop");
    is_boundary_[v] = true;
    boundary_loop_.push_back(v);
  }
  if (boundary_loop_.size() != boundary_edges) throw InputError("surface has multiple boundary loops");

  // Connectivity over vertices used by triangles.
  std::vector<std::vector<int>> adj(nv);
  for (const auto& t : triangles_)
    for (int k = 0; k < 3; ++k) adj[t[k]].push_back(t[(k + 1) % 3]), adj[t[(k + 1) % 3]].push_back(t[k]);
  std::vector<bool> seen(nv, false);
  std::queue<int> q;
  q.push(triangles_[0][0]);
  seen[triangles_[0][0]] = true;
  std::size_t reached = 1;
  while (!q.empty()) {
    int v = q.front();
    q.pop();
    for (int w : adj[v])
      if (!seen[w]) seen[w] = true, ++reached, q.push(w);
  }
  std::size_t used = std::count_if(adj.begin(), adj.end(), [](const auto& a) { return !a.empty(); });
  if (reached != used) throw InputError("surface is not connected");
  if (used != static_cast<std::size_t>(nv)) throw InputError("surface has unreferenced vertices");
  if (boundary_loop_.size() == static_cast<std::size_t>(nv)) throw InputError("surface has no interior vertices");
}

double SurfaceMesh::triangle_area(std::size_t t) const {
  const auto& tri = triangles_[t];
  return 0.5 * (vertices_[tri[1]] - vertices_[tri[0]]).cross(vertices_[tri[2]] - vertices_[tri[0]]).norm();
}

double SurfaceMesh::total_area() const {
  double a = 0.0;
  for (std::size_t t = 0; t < triangles_.size(); ++t) a += triangle_area(t);
  return a;
}

namespace {

std::vector<std::array<int, 3>> fan(const std::vector<int>& poly) {
  std::vector<std::array<int, 3>> out;
  for (std::size_t k = 1; k + 1 < poly.size(); ++k) out.push_back({poly[0], poly[k], poly[k + 1]});
  return out;
}

SurfaceMesh parse_obj(std::istream& in) {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> tris;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ss >> p.x() >> p.y() >> p.z())) throw InputError("OBJ line " + std::to_string(lineno) + ": bad vertex");
      verts.push_back(p);
    } else if (tag == "f") {
      std::vector<int> poly;
      std::string tok;
      while (ss >> tok) {
        int idx = 0;
        try {
          idx = std::stoi(tok.substr(0, tok.find('/')));
        } catch (const std::exception&) {
          throw InputError("OBJ line " + std::to_string(lineno) + ": bad face index '" + tok + "'");
        }
        poly.push_back(idx > 0 ? idx - 1 : static_cast<int>(verts.size()) + idx);
      }
      if (poly.size() < 3) throw InputError("OBJ line " + std::to_string(lineno) + ": face with < 3 vertices");
      for (const auto& t : fan(poly)) tris.push_back(t);
    }
  }
  return SurfaceMesh(std::move(verts), std::move(tris));
}

SurfaceMesh parse_off(std::istream& in) {
  auto next_content = [&in](std::string& line) {
    while (std::getline(in, line)) {
      auto pos = line.find('#');
      if (pos != std::string::npos) line.erase(pos);
      if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };
  std::string line;
  if (!next_content(line) || line.substr(0, 3) != "OFF") throw InputError("OFF: missing header");
  std::istringstream rest(line.substr(3));
  std::size_t nv = 0, nf = 0, ne = 0;
  if (!(rest >> nv)) {
    if (!next_content(line)) throw InputError("OFF: missing counts");
    rest = std::istringstream(line);
    rest >> nv;
  }
  if (!(rest >> nf >> ne)) throw InputError("OFF: bad counts line");
  std::vector<Vec3> verts(nv);
  for (auto& p : verts) {
    if (!next_content(line)) throw InputError("OFF: truncated vertex list");
    std::istringstream ss(line);
    if (!(ss >> p.x() >> p.y() >> p.z())) throw InputError("OFF: bad vertex");
  }
  std::vector<std::array<int, 3>> tris;
  for (std::size_t f = 0; f < nf; ++f) {
    if (!next_content(line)) throw InputError("OFF: truncated face list");
    std::istringstream ss(line);
    int n = 0;
    ss >> n;
    std::vector<int> poly(std::max(n, 0));
    for (auto& v : poly)
      if (!(ss >> v)) throw InputError("OFF: bad face");
    if (n < 3) throw InputError("OFF: face with < 3 vertices");
    for (const auto& t : fan(poly)) tris.push_back(t);
  }
  return SurfaceMesh(std::move(verts), std::move(tris));
}

}  // namespace

SurfaceMesh load_surface(const std::filesystem::path& path, SurfaceFormat format) {
  auto in = open_input(path);
  try {
    return format == SurfaceFormat::OBJ ? parse_obj(in) : parse_off(in);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

SurfaceMesh load_surface(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == ".obj") return load_surface(path, SurfaceFormat::OBJ);
  if (ext == ".off") return load_surface(path, SurfaceFormat::OFF);
  throw InputError(path.string() + ": unknown surface format (expected .obj or .off)");
}

void save_surface_obj(const SurfaceMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(17);
  for (const auto& p : mesh.vertices()) out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& t : mesh.triangles()) out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

// --- VolumeMesh ----------------------------------------------------------

VolumeMesh::VolumeMesh(std::vector<Vec3> vertices, std::vector<std::array<int, 4>> tets, std::vector<Vec3> fibers)
    : vertices_(std::move(vertices)), tets_(std::move(tets)), fibers_(std::move(fibers)) {
  const int nv = static_cast<int>(vertices_.size());
  if (tets_.empty()) throw InputError("volume mesh has no tets");
  if (fibers_.size() != tets_.size())
    throw InputError("fiber count " + std::to_string(fibers_.size()) + " != tet count " + std::to_string(tets_.size()));
  for (std::size_t t = 0; t < tets_.size(); ++t) {
    for (int v : tets_[t])
      if (v < 0 || v >= nv) throw InputError("tet " + std::to_string(t) + " references vertex out of range");
    if (tet_volume(t) <= 0.0) throw InputError("tet " + std::to_string(t) + " is degenerate or negatively oriented");
    if (std::abs(fibers_[t].norm() - 1.0) > 1e-6) throw InputError("fiber of tet " + std::to_string(t) + " is not unit");
  }
  vertex_tets_.assign(nv, {});
  vertex_neighbors_.assign(nv, {});
  for (std::size_t t = 0; t < tets_.size(); ++t)
    for (int a : tets_[t]) {
      vertex_tets_[a].push_back(static_cast<int>(t));
      for (int b : tets_[t])
        if (a != b) vertex_neighbors_[a].push_back(b);
    }
  for (auto& n : vertex_neighbors_) {
    std::sort(n.begin(), n.end());
    n.erase(std::unique(n.begin(), n.end()), n.end());
  }
  bbox_min_ = bbox_max_ = vertices_[0];
  for (const auto& p : vertices_) bbox_min_ = bbox_min_.cwiseMin(p), bbox_max_ = bbox_max_.cwiseMax(p);
}

double VolumeMesh::tet_volume(std::size_t t) const {
  const auto& k = tets_[t];
  const Vec3& a = vertices_[k[0]];
  return (vertices_[k[1]] - a).dot((vertices_[k[2]] - a).cross(vertices_[k[3]] - a)) / 6.0;
}

Vec3 VolumeMesh::tet_centroid(std::size_t t) const {
  const auto& k = tets_[t];
  return 0.25 * (vertices_[k[0]] + vertices_[k[1]] + vertices_[k[2]] + vertices_[k[3]]);
}

std::array<Vec3, 4> VolumeMesh::shape_gradients(std::size_t t) const {
  const auto& k = tets_[t];
  Mat3 J;
  J.col(0) = vertices_[k[1]] - vertices_[k[0]];
  J.col(1) = vertices_[k[2]] - vertices_[k[0]];
  J.col(2) = vertices_[k[3]] - vertices_[k[0]];
  // Rows of J^{-1} are the gradients of the barycentric coordinates 1..3.
  const Mat3 Jinv = J.inverse();
  std::array<Vec3, 4> g;
  g[1] = Jinv.row(0).transpose();
  g[2] = Jinv.row(1).transpose();
  g[3] = Jinv.row(2).transpose();
  g[0] = -(g[1] + g[2] + g[3]);
  return g;
}

VolumeMesh load_volume(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::vector<Vec3> verts, fibers;
  std::vector<std::array<int, 4>> tets;
  std::vector<int> left, right;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    bool ok = true;
    if (tag == "v" || tag == "f") {
      Vec3 p;
      ok = static_cast<bool>(ss >> p.x() >> p.y() >> p.z());
      (tag == "v" ? verts : fibers).push_back(p);
    } else if (tag == "t") {
      std::array<int, 4> t{};
      ok = static_cast<bool>(ss >> t[0] >> t[1] >> t[2] >> t[3]);
      tets.push_back(t);
    } else if (tag == "sl" || tag == "sr") {
      int id = -1;
      ok = static_cast<bool>(ss >> id);
      (tag == "sl" ? left : right).push_back(id);
    } else {
      ok = false;
    }
    if (!ok) throw InputError(path.string() + ":" + std::to_string(lineno) + ": cannot parse '" + line + "'");
  }
  try {
    VolumeMesh vm(std::move(verts), std::move(tets), std::move(fibers));
    vm.endocardial_left = std::move(left);
    vm.endocardial_right = std::move(right);
    return vm;
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void save_volume(const VolumeMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(17);
  for (const auto& p : mesh.vertices()) out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& t : mesh.tets()) out << "t " << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
  for (const auto& f : mesh.fibers()) out << "f " << f.x() << ' ' << f.y() << ' ' << f.z() << '\n';
  for (int i : mesh.endocardial_left) out << "sl " << i << '\n';
  for (int i : mesh.endocardial_right) out << "sr " << i << '\n';
}

// --- Harmonic flattening -------------------------------------------------

FlatMap harmonic_flatten(const SurfaceMesh& mesh) {
  const auto& V = mesh.vertices();
  const auto& T = mesh.triangles();
  const auto& loop = mesh.boundary_loop();
  const int nv = static_cast<int>(mesh.num_vertices());

  FlatMap fm;
  fm.uv.assign(nv, Vec2::Zero());

  // Boundary: cumulative arc length onto the unit circle.
  std::vector<double> cum(loop.size() + 1, 0.0);
  for (std::size_t k = 0; k < loop.size(); ++k)
    cum[k + 1] = cum[k] + (V[loop[(k + 1) % loop.size()]] - V[loop[k]]).norm();
  const double perimeter = cum.back();
  if (!(perimeter > 0.0)) throw NumericError("boundary loop has zero length");
  for (std::size_t k = 0; k < loop.size(); ++k) {
    double phi = 2.0 * kPi * cum[k] / perimeter;
    fm.uv[loop[k]] = Vec2(std::cos(phi), std::sin(phi));
  }

  // Interior unknowns.
  std::vector<int> index(nv, -1);
  int n_int = 0;
  for (int v = 0; v < nv; ++v)
    if (!mesh.is_boundary()[v]) index[v] = n_int++;

  // Cotangent weights accumulated per undirected edge, then clamped at zero.
  std::map<std::pair<int, int>, double> weights;
  for (const auto& t : T) {
    for (int k = 0; k < 3; ++k) {
      int i = t[k], j = t[(k + 1) % 3], o = t[(k + 2) % 3];
      Vec3 a = V[i] - V[o], b = V[j] - V[o];
      double cross = a.cross(b).norm();
      if (cross <= 0.0) throw NumericError("degenerate 3D triangle in surface");
      weights[{std::min(i, j), std::max(i, j)}] += 0.5 * a.dot(b) / cross;
    }
  }

  std::vector<Eigen::Triplet<double>> trip;
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n_int, 2);
  std::vector<double> diag(n_int, 0.0);
  for (const auto& [edge, w_raw] : weights) {
    double w = std::max(w_raw, 0.0);
    if (w == 0.0) continue;
    auto [i, j] = edge;
    for (auto [a, b] : {std::pair{i, j}, std::pair{j, i}}) {
      if (index[a] < 0) continue;
      diag[index[a]] += w;
      if (index[b] >= 0)
        trip.emplace_back(index[a], index[b], -w);
      else
        rhs.row(index[a]) += w * fm.uv[b].transpose();
    }
  }
  for (int r = 0; r < n_int; ++r) {
    if (diag[r] <= 0.0) throw NumericError("interior vertex with no positive Laplacian weight; singular system");
    trip.emplace_back(r, r, diag[r]);
  }
  Eigen::SparseMatrix<double> L(n_int, n_int);
  L.setFromTriplets(trip.begin(), trip.end());
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(L);
  if (solver.info() != Eigen::Success) throw NumericError("harmonic map: factorization failed (disconnected interior?)");
  Eigen::MatrixXd sol = solver.solve(rhs);
  if (solver.info() != Eigen::Success || !sol.allFinite()) throw NumericError("harmonic map: solve failed");
  for (int v = 0; v < nv; ++v)
    if (index[v] >= 0) fm.uv[v] = sol.row(index[v]).transpose();

  fm.scale.resize(T.size());
  for (std::size_t t = 0; t < T.size(); ++t) {
    double a2 = signed_area_2d(fm.uv[T[t][0]], fm.uv[T[t][1]], fm.uv[T[t][2]]);
    if (!(a2 > 1e-14)) throw NumericError("degenerate or flipped triangle " + std::to_string(t) + " after flattening");
    fm.scale[t] = std::sqrt(mesh.triangle_area(t) / a2);
  }
  return fm;
}

nlohmann::json to_json(const FlatMap& fm) {
  nlohmann::json j;
  j["uv"] = nlohmann::json::array();
  for (const auto& p : fm.uv) j["uv"].push_back({p.x(), p.y()});
  j["scale"] = fm.scale;
  return j;
}

FlatMap flatmap_from_json(const nlohmann::json& j) {
  FlatMap fm;
  for (const auto& p : j.at("uv")) fm.uv.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  fm.scale = j.at("scale").get<std::vector<double>>();
  return fm;
}

void save_flatmap(const FlatMap& fm, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << to_json(fm).dump();
}

FlatMap load_flatmap(const std::filesystem::path& path) {
  auto in = open_input(path);
  try {
    return flatmap_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

// --- Point location ------------------------------------------------------

UvLocator::UvLocator(const FlatMap& fm, const SurfaceMesh& mesh) : fm_(&fm), mesh_(&mesh) {
  if (fm.uv.size() != mesh.num_vertices() || fm.scale.size() != mesh.num_triangles())
    throw InputError("flat map does not match surface mesh");
  cells_ = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(mesh.num_triangles()) / 2.0)));
  cell_size_ = 2.0 / cells_;
  buckets_.assign(static_cast<std::size_t>(cells_) * cells_, {});
  auto cell = [this](double x) { return std::clamp(static_cast<int>(std::floor((x + 1.0) / cell_size_)), 0, cells_ - 1); };
  const auto& T = mesh.triangles();
  for (std::size_t t = 0; t < T.size(); ++t) {
    Vec2 lo = fm.uv[T[t][0]], hi = lo;
    for (int k = 1; k < 3; ++k) lo = lo.cwiseMin(fm.uv[T[t][k]]), hi = hi.cwiseMax(fm.uv[T[t][k]]);
    for (int cx = cell(lo.x() - 1e-12); cx <= cell(hi.x() + 1e-12); ++cx)
      for (int cy = cell(lo.y() - 1e-12); cy <= cell(hi.y() + 1e-12); ++cy)
        buckets_[static_cast<std::size_t>(cx) * cells_ + cy].push_back(static_cast<int>(t));
  }
}

std::optional<SurfacePoint> UvLocator::locate(const Vec2& u) const {
  if (!u.allFinite() || std::abs(u.x()) > 1.0 + 1e-9 || std::abs(u.y()) > 1.0 + 1e-9) return std::nullopt;
  int cx = std::clamp(static_cast<int>(std::floor((u.x() + 1.0) / cell_size_)), 0, cells_ - 1);
  int cy = std::clamp(static_cast<int>(std::floor((u.y() + 1.0) / cell_size_)), 0, cells_ - 1);
  const auto& T = mesh_->triangles();
  const auto& uv = fm_->uv;
  int best = -1;
  Vec3 best_bary;
  double best_min = -kInf;
  for (int t : buckets_[static_cast<std::size_t>(cx) * cells_ + cy]) {
    const Vec2 &a = uv[T[t][0]], &b = uv[T[t][1]], &c = uv[T[t][2]];
    double area = signed_area_2d(a, b, c);
    Vec3 bary(signed_area_2d(u, b, c) / area, signed_area_2d(a, u, c) / area, signed_area_2d(a, b, u) / area);
    double m = bary.minCoeff();
    if (m > best_min) best_min = m, best = t, best_bary = bary;
    if (m >= 0.0) break;
  }
  if (best < 0 || best_min < -1e-12) return std::nullopt;
  SurfacePoint sp;
  sp.triangle = best;
  sp.barycentric = best_bary;
  const auto& V = mesh_->vertices();
  const auto& tri = T[best];
  // Exact vertex hits return the vertex itself, not a rounded combination.
  for (int k = 0; k < 3; ++k)
    if (u == uv[tri[k]]) {
      sp.position = V[tri[k]];
      return sp;
    }
  sp.position = best_bary[0] * V[tri[0]] + best_bary[1] * V[tri[1]] + best_bary[2] * V[tri[2]];
  return sp;
}

std::optional<double> UvLocator::scale_at(const Vec2& u) const {
  auto sp = locate(u);
  if (!sp) return std::nullopt;
  return fm_->scale[sp->triangle];
}

SurfacePoint map_to_surface(const FlatMap& fm, const SurfaceMesh& mesh, const Vec2& u) {
  UvLocator loc(fm, mesh);
  auto sp = loc.locate(u);
  if (!sp) throw InputError("point (" + std::to_string(u.x()) + ", " + std::to_string(u.y()) + ") is outside the mapped domain");
  return *sp;
}

}  // namespace purkinje
