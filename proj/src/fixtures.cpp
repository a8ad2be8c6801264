#include "purkinje/fixtures.hpp"

#include <cmath>
#include <map>

namespace purkinje {

namespace {

// Stitches an inner ring (or single centre vertex) to an outer ring. Ring
// vertices are listed by increasing azimuth starting at zero.
void stitch(const std::vector<int>& inner, const std::vector<int>& outer, std::vector<std::array<int, 3>>& tris) {
  const std::size_t m = inner.size(), n = outer.size();
  if (m == 1) {
    for (std::size_t j = 0; j < n; ++j) tris.push_back({inner[0], outer[j], outer[(j + 1) % n]});
    return;
  }
  std::size_t i = 0, j = 0;
  while (i < m || j < n) {
    double next_a = static_cast<double>(i + 1) / m;
    double next_b = static_cast<double>(j + 1) / n;
    if (j < n && (i == m || next_b <= next_a)) {
      tris.push_back({inner[i % m], outer[j], outer[(j + 1) % n]});
      ++j;
    } else {
      tris.push_back({inner[i], outer[j % n], inner[(i + 1) % m]});
      ++i;
    }
  }
}

}  // namespace

SurfaceMesh make_disk_mesh(int rings, double radius) {
  if (rings < 1) throw InputError("disk mesh needs at least one ring");
  std::vector<Vec3> verts{Vec3::Zero()};
  std::vector<std::array<int, 3>> tris;
  std::vector<int> prev{0};
  for (int k = 1; k <= rings; ++k) {
    std::vector<int> ring;
    const int n = 6 * k;
    const double r = radius * k / rings;
    for (int j = 0; j < n; ++j) {
      double phi = 2.0 * kPi * j / n;
      ring.push_back(static_cast<int>(verts.size()));
      verts.emplace_back(r * std::cos(phi), r * std::sin(phi), 0.0);
    }
    stitch(prev, ring, tris);
    prev = std::move(ring);
  }
  return SurfaceMesh(std::move(verts), std::move(tris));
}

SurfaceMesh make_half_ellipsoid(const Vec3& center, const Vec3& radii, int rings) {
  if (rings < 1) throw InputError("half ellipsoid needs at least one ring");
  // Meridian arc length in the xz-plane, tabulated to place rings evenly.
  const int samples = 4096;
  std::vector<double> arc(samples + 1, 0.0);
  auto meridian = [&](double phi) { return Vec2(radii.x() * std::sin(phi), -radii.z() * std::cos(phi)); };
  for (int s = 1; s <= samples; ++s)
    arc[s] = arc[s - 1] + (meridian(0.5 * kPi * s / samples) - meridian(0.5 * kPi * (s - 1) / samples)).norm();
  const double spacing = arc.back() / rings;

  std::vector<Vec3> verts{center - Vec3(0, 0, radii.z())};
  std::vector<std::array<int, 3>> tris;
  std::vector<int> prev{0};
  int s = 0;
  for (int k = 1; k <= rings; ++k) {
    double target = spacing * k;
    while (s < samples && arc[s + 1] < target) ++s;
    double phi = 0.5 * kPi;
    if (k < rings) {
      double frac = (target - arc[s]) / (arc[s + 1] - arc[s]);
      phi = 0.5 * kPi * (s + frac) / samples;
    }
    double circumference = 2.0 * kPi * 0.5 * (radii.x() + radii.y()) * std::sin(phi);
    int n = std::max(6, static_cast<int>(std::lround(circumference / spacing)));
    std::vector<int> ring;
    for (int j = 0; j < n; ++j) {
      double theta = 2.0 * kPi * j / n;
      ring.push_back(static_cast<int>(verts.size()));
      verts.push_back(center + Vec3(radii.x() * std::sin(phi) * std::cos(theta), radii.y() * std::sin(phi) * std::sin(theta),
                                    -radii.z() * std::cos(phi)));
    }
    stitch(prev, ring, tris);
    prev = std::move(ring);
  }
  return SurfaceMesh(std::move(verts), std::move(tris));
}

namespace {

// Kuhn subdivision of a cube: six tets along the main diagonal, conforming
// across neighbouring cubes.
constexpr int kKuhn[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};

struct VoxelBuilder {
  Vec3 origin;
  double h;
  int nx, ny, nz;
  std::map<std::array<int, 3>, int> ids;
  std::vector<Vec3> verts;
  std::vector<std::array<int, 4>> tets;
  std::vector<Vec3> centroids;

  int vertex(int i, int j, int k) {
    auto [it, inserted] = ids.emplace(std::array<int, 3>{i, j, k}, static_cast<int>(verts.size()));
    if (inserted) verts.push_back(origin + h * Vec3(i, j, k));
    return it->second;
  }

  void add_cube(int i, int j, int k) {
    for (const auto& perm : kKuhn) {
      std::array<int, 3> c{i, j, k};
      std::array<int, 4> t{};
      t[0] = vertex(c[0], c[1], c[2]);
      for (int s = 0; s < 3; ++s) {
        ++c[perm[s]];
        t[s + 1] = vertex(c[0], c[1], c[2]);
      }
      const Vec3 &a = verts[t[0]], &b = verts[t[1]], &cc = verts[t[2]], &d = verts[t[3]];
      if ((b - a).dot((cc - a).cross(d - a)) < 0) std::swap(t[2], t[3]);
      tets.push_back(t);
      centroids.push_back(0.25 * (verts[t[0]] + verts[t[1]] + verts[t[2]] + verts[t[3]]));
    }
  }
};

}  // namespace

VolumeMesh make_box_mesh(const Vec3& lo, const Vec3& hi, int nx, int ny, int nz, const Vec3& fiber) {
  if (nx < 1 || ny < 1 || nz < 1) throw InputError("box mesh needs at least one cell per axis");
  std::vector<Vec3> verts;
  auto id = [&](int i, int j, int k) { return (k * (ny + 1) + j) * (nx + 1) + i; };
  for (int k = 0; k <= nz; ++k)
    for (int j = 0; j <= ny; ++j)
      for (int i = 0; i <= nx; ++i)
        verts.push_back(lo + Vec3((hi.x() - lo.x()) * i / nx, (hi.y() - lo.y()) * j / ny, (hi.z() - lo.z()) * k / nz));
  std::vector<std::array<int, 4>> tets;
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        for (const auto& perm : kKuhn) {
          std::array<int, 3> c{i, j, k};
          std::array<int, 4> t{};
          t[0] = id(c[0], c[1], c[2]);
          for (int s = 0; s < 3; ++s) {
            ++c[perm[s]];
            t[s + 1] = id(c[0], c[1], c[2]);
          }
          const Vec3 &a = verts[t[0]], &b = verts[t[1]], &cc = verts[t[2]], &d = verts[t[3]];
          if ((b - a).dot((cc - a).cross(d - a)) < 0) std::swap(t[2], t[3]);
          tets.push_back(t);
        }
  std::vector<Vec3> fibers(tets.size(), fiber.normalized());
  return VolumeMesh(std::move(verts), std::move(tets), std::move(fibers));
}

namespace {

double ellipsoid_radius(const Vec3& x, const Vec3& c, const Vec3& r) {
  return (x - c).cwiseQuotient(r).norm();
}

Vec3 helix_fiber(const Vec3& x, const Vec3& center, double transmural) {
  Vec3 radial(x.x() - center.x(), x.y() - center.y(), 0.0);
  if (radial.norm() < 1e-9) radial = Vec3::UnitX();
  Vec3 circ = Vec3::UnitZ().cross(radial).normalized();
  double helix = (60.0 - 120.0 * std::clamp(transmural, 0.0, 1.0)) * kPi / 180.0;
  return (std::cos(helix) * circ + std::sin(helix) * Vec3::UnitZ()).normalized();
}

}  // namespace

std::array<Vec3, 9> default_electrodes(const BiventricularGeometry& geo) {
  (void)geo;
  return {Vec3(-150, 0, 150),  Vec3(150, 0, 150),  Vec3(50, 0, -250),  Vec3(-30, 100, 0),   Vec3(10, 100, 0),
          Vec3(40, 95, -20),   Vec3(70, 85, -40),  Vec3(100, 60, -40), Vec3(130, 20, -40)};
}

BiventricularFixture make_biventricular(double h, int surface_rings, const BiventricularGeometry& geo) {
  if (!(h > 0.0)) throw InputError("voxel size must be positive");
  // Tissue extends one voxel into each cavity so that the endocardial
  // surfaces lie inside the tetrahedral mesh.
  auto shrink = [h](const Vec3& r) { return (r.array() - h).matrix().eval(); };
  const Vec3 lv_in = shrink(geo.lv_cavity), rv_in = shrink(geo.rv_cavity);
  auto in_tissue = [&](const Vec3& x) {
    if (x.z() > 0.0) return false;
    bool outer = ellipsoid_radius(x, geo.lv_center, geo.lv_outer) <= 1.0 ||
                 ellipsoid_radius(x, geo.rv_center, geo.rv_outer) <= 1.0;
    bool cavity = ellipsoid_radius(x, geo.lv_center, lv_in) < 1.0 || ellipsoid_radius(x, geo.rv_center, rv_in) < 1.0;
    return outer && !cavity;
  };

  Vec3 lo = geo.lv_center - geo.lv_outer, hi = geo.lv_center + geo.lv_outer;
  lo = lo.cwiseMin(geo.rv_center - geo.rv_outer);
  hi = hi.cwiseMax(geo.rv_center + geo.rv_outer);
  hi.z() = 0.0;
  VoxelBuilder vb;
  vb.h = h;
  vb.nx = static_cast<int>(std::ceil((hi.x() - lo.x()) / h)) + 1;
  vb.ny = static_cast<int>(std::ceil((hi.y() - lo.y()) / h)) + 1;
  vb.nz = static_cast<int>(std::ceil((hi.z() - lo.z()) / h));
  // Grid aligned so that the basal plane z = 0 is a grid plane.
  vb.origin = Vec3(lo.x() - 0.5 * h, lo.y() - 0.5 * h, -vb.nz * h);
  for (int k = 0; k < vb.nz; ++k)
    for (int j = 0; j < vb.ny; ++j)
      for (int i = 0; i < vb.nx; ++i)
        if (in_tissue(vb.origin + h * Vec3(i + 0.5, j + 0.5, k + 0.5))) vb.add_cube(i, j, k);
  if (vb.tets.empty()) throw InputError("fixture geometry produced an empty mesh");

  std::vector<Vec3> fibers;
  fibers.reserve(vb.tets.size());
  for (const auto& x : vb.centroids) {
    double rl = ellipsoid_radius(x, geo.lv_center, geo.lv_cavity);
    double rr = ellipsoid_radius(x, geo.rv_center, geo.rv_cavity);
    double lv_wall = geo.lv_outer.x() / geo.lv_cavity.x() - 1.0;
    double rv_wall = geo.rv_outer.x() / geo.rv_cavity.x() - 1.0;
    // Assign each element to the chamber whose wall it is closer to.
    if ((rl - 1.0) / lv_wall <= (rr - 1.0) / rv_wall)
      fibers.push_back(helix_fiber(x, geo.lv_center, (rl - 1.0) / lv_wall));
    else
      fibers.push_back(helix_fiber(x, geo.rv_center, (rr - 1.0) / rv_wall));
  }

  VolumeMesh vm(std::move(vb.verts), std::move(vb.tets), std::move(fibers));
  SurfaceMesh left = make_half_ellipsoid(geo.lv_center, geo.lv_cavity, surface_rings);
  SurfaceMesh right = make_half_ellipsoid(geo.rv_center, geo.rv_cavity, surface_rings);

  // Nearest volume vertex for each endocardial vertex.
  auto link = [&vm](const SurfaceMesh& s) {
    std::vector<int> ids;
    for (const auto& p : s.vertices()) {
      int best = 0;
      double bd = kInf;
      for (std::size_t v = 0; v < vm.num_vertices(); ++v) {
        double d = (vm.vertices()[v] - p).squaredNorm();
        if (d < bd) bd = d, best = static_cast<int>(v);
      }
      ids.push_back(best);
    }
    return ids;
  };
  vm.endocardial_left = link(left);
  vm.endocardial_right = link(right);
  return BiventricularFixture{std::move(left), std::move(right), std::move(vm), default_electrodes(geo)};
}

}  // namespace purkinje
