#pragma once

#include "purkinje/mesh.hpp"

namespace purkinje {

/// Planar unit disk in the z = 0 plane: a centre vertex plus `rings` concentric
/// rings with 6k vertices each. Triangles wind counter-clockwise seen from +z.
SurfaceMesh make_disk_mesh(int rings, double radius = 1.0);

/// Open half-ellipsoid, apex at center - (0, 0, radii.z), rim in the plane z = center.z.
/// Rings are spaced uniformly in meridian arc length.
SurfaceMesh make_half_ellipsoid(const Vec3& center, const Vec3& radii, int rings);

/// Structured box [lo, hi] split into nx*ny*nz cubes, six tets per cube, uniform fiber.
VolumeMesh make_box_mesh(const Vec3& lo, const Vec3& hi, int nx, int ny, int nz, const Vec3& fiber = Vec3::UnitX());

/// Idealized two-chamber anatomy used by the bundled test fixtures.
struct BiventricularGeometry {
  Vec3 lv_center{10.0, 0.0, 0.0};
  Vec3 lv_cavity{20.0, 20.0, 55.0};
  Vec3 lv_outer{30.0, 30.0, 65.0};
  Vec3 rv_center{-36.0, 0.0, 0.0};
  Vec3 rv_cavity{16.0, 34.0, 62.0};
  Vec3 rv_outer{24.0, 42.0, 70.0};
};

struct BiventricularFixture {
  SurfaceMesh left_endo;
  SurfaceMesh right_endo;
  VolumeMesh myocardium;
  std::array<Vec3, 9> electrodes;  // RA, LA, LL, V1..V6
};

/// Voxelized biventricular shell with rule-based fibers (helix angle +60 deg endo to -60 deg epi).
/// `h` is the voxel edge in mm; `surface_rings` controls the endocardial surface resolution.
BiventricularFixture make_biventricular(double h = 6.0, int surface_rings = 24,
                                        const BiventricularGeometry& geo = {});

/// Default electrode positions on an ellipsoid enclosing the fixture anatomy.
std::array<Vec3, 9> default_electrodes(const BiventricularGeometry& geo = {});

}  // namespace purkinje
