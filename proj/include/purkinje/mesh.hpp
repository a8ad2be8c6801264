#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "purkinje/common.hpp"

namespace purkinje {

enum class SurfaceFormat { OBJ, OFF };

/// Triangulated open surface with exactly one boundary loop (disk topology).
///
/// The boundary loop follows the orientation induced by the triangle winding
/// and starts at its lowest-index vertex. Construction validates the mesh;
/// instances are immutable afterwards.
class SurfaceMesh {
 public:
  SurfaceMesh(std::vector<Vec3> vertices, std::vector<std::array<int, 3>> triangles);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<std::array<int, 3>>& triangles() const { return triangles_; }
  const std::vector<int>& boundary_loop() const { return boundary_loop_; }
  const std::vector<bool>& is_boundary() const { return is_boundary_; }

  std::size_t num_vertices() const { return vertices_.size(); }
  std::size_t num_triangles() const { return triangles_.size(); }

  double triangle_area(std::size_t t) const;
  double total_area() const;

 private:
  std::vector<Vec3> vertices_;
  std::vector<std::array<int, 3>> triangles_;
  std::vector<int> boundary_loop_;
  std::vector<bool> is_boundary_;
};

SurfaceMesh load_surface(const std::filesystem::path& path, SurfaceFormat format);
SurfaceMesh load_surface(const std::filesystem::path& path);  // format from extension
void save_surface_obj(const SurfaceMesh& mesh, const std::filesystem::path& path);

/// Tetrahedral myocardium with one unit fiber vector per element.
class VolumeMesh {
 public:
  VolumeMesh(std::vector<Vec3> vertices, std::vector<std::array<int, 4>> tets, std::vector<Vec3> fibers);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<std::array<int, 4>>& tets() const { return tets_; }
  const std::vector<Vec3>& fibers() const { return fibers_; }

  std::size_t num_vertices() const { return vertices_.size(); }
  std::size_t num_tets() const { return tets_.size(); }

  double tet_volume(std::size_t t) const;
  Vec3 tet_centroid(std::size_t t) const;
  /// Gradients of the four linear shape functions of element t.
  std::array<Vec3, 4> shape_gradients(std::size_t t) const;

  /// Tets incident to each vertex.
  const std::vector<std::vector<int>>& vertex_tets() const { return vertex_tets_; }
  /// Vertices sharing an edge with each vertex.
  const std::vector<std::vector<int>>& vertex_neighbors() const { return vertex_neighbors_; }

  Vec3 bbox_min() const { return bbox_min_; }
  Vec3 bbox_max() const { return bbox_max_; }

  /// Links from left/right endocardial surface vertices to volume vertices (may be empty).
  std::vector<int> endocardial_left;
  std::vector<int> endocardial_right;

 private:
  std::vector<Vec3> vertices_;
  std::vector<std::array<int, 4>> tets_;
  std::vector<Vec3> fibers_;
  std::vector<std::vector<int>> vertex_tets_;
  std::vector<std::vector<int>> vertex_neighbors_;
  Vec3 bbox_min_ = Vec3::Zero();
  Vec3 bbox_max_ = Vec3::Zero();
};

/// Plain-text volume format: "v x y z", "t i j k l", "f fx fy fz" (one fiber per tet, in tet
/// order), optional "sl i" / "sr i" endocardial links. Indices are 0-based, '#' starts a comment.
VolumeMesh load_volume(const std::filesystem::path& path);
void save_volume(const VolumeMesh& mesh, const std::filesystem::path& path);

/// Harmonic parameterization of a SurfaceMesh onto the unit disk.
struct FlatMap {
  std::vector<Vec2> uv;      // one per surface vertex
  std::vector<double> scale;  // one per triangle, mm per uv unit
};

FlatMap harmonic_flatten(const SurfaceMesh& mesh);

nlohmann::json to_json(const FlatMap& fm);
FlatMap flatmap_from_json(const nlohmann::json& j);
void save_flatmap(const FlatMap& fm, const std::filesystem::path& path);
FlatMap load_flatmap(const std::filesystem::path& path);

struct SurfacePoint {
  Vec3 position;
  int triangle = -1;
  Vec3 barycentric = Vec3::Zero();
};

/// Point location in the uv domain of a FlatMap, backed by a uniform bucket grid.
class UvLocator {
 public:
  UvLocator(const FlatMap& fm, const SurfaceMesh& mesh);

  /// Containing triangle and 3D image of u, or nullopt when u is not covered by any triangle.
  std::optional<SurfacePoint> locate(const Vec2& u) const;
  /// Local length scale s(u) (mm per uv unit), or nullopt outside the mapped domain.
  std::optional<double> scale_at(const Vec2& u) const;

 private:
  const FlatMap* fm_;
  const SurfaceMesh* mesh_;
  int cells_ = 1;
  double cell_size_ = 2.0;
  std::vector<std::vector<int>> buckets_;
};

/// One-shot lookup; throws InputError when u lies outside the mapped domain.
SurfacePoint map_to_surface(const FlatMap& fm, const SurfaceMesh& mesh, const Vec2& u);

}  // namespace purkinje
