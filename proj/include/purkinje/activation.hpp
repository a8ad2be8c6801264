#pragma once

#include <filesystem>
#include <functional>
#include <span>

#include "purkinje/mesh.hpp"
#include "purkinje/tree.hpp"

namespace purkinje {

/// Bidomain conductivities (mS/cm) and the scaling that turns the harmonic-mean
/// monodomain tensor into squared velocities.
struct ConductivityModel {
  double sigma_il = 3.0;
  double sigma_el = 3.0;
  double sigma_it = 0.3;
  double sigma_et = 1.2;
  double alpha = 0.1;
  /// (mm/ms)^2 per mS/cm. With the defaults, fiber velocity is 0.6 m/s and transverse 0.24 m/s.
  double velocity_gain = 24.0;

  void validate() const;
  /// G_i = sigma_it I + (sigma_il - sigma_it) f f^T, in mS/cm.
  Mat3 intracellular(const Vec3& fiber) const;
  Mat3 extracellular(const Vec3& fiber) const;
};

/// alpha^2 G_i (G_i + G_e)^{-1} G_e in conductivity units (mS/cm).
Mat3 monodomain_tensor(const ConductivityModel& cm, const Vec3& fiber);
/// Eikonal metric D in (mm/ms)^2: monodomain_tensor scaled by velocity_gain.
Mat3 tensor_from_fibers(const ConductivityModel& cm, const Vec3& fiber);
std::vector<Mat3> tensor_field(const ConductivityModel& cm, const VolumeMesh& vm);

struct TreeSource {
  int node;
  double time;  // ms
};

/// Shortest-path activation on a tree with uniform velocity `cv` (m/s == mm/ms).
/// Unreachable nodes get +inf.
std::vector<double> solve_tree(const PurkinjeTree& tree, double cv, std::span<const TreeSource> sources);

struct VertexSeed {
  int vertex;
  double time;
};

/// Element of the myocardial mesh that hosts an off-node point.
struct PointLocation {
  int tet = -1;                    // -1 when snapped to a vertex
  std::array<double, 4> bary{};    // barycentric weights inside `tet`
  int vertex = -1;                 // snapped vertex, when tet == -1
  double snap_distance = 0.0;
};

enum class Stencil {
  OneRing,  // opposite faces of the tets incident to the vertex
  TwoRing,  // every face of the tets incident to the vertex or to one of its neighbours
};

struct EikonalOptions {
  Stencil stencil = Stencil::TwoRing;
  /// Mesh-connected vertices within this distance (mm) of a seed vertex take the straight-line
  /// travel time from it, which removes the point-source log factor from the error.
  double source_radius = 2.0;

  void validate() const;
};

/// Anisotropic eikonal solver on a fixed tetrahedral mesh with element-constant D.
///
/// Uses an active list of vertices ordered by tentative arrival time; each pop
/// re-evaluates the stencil faces containing the popped vertex (exact minimisation
/// of arrival through the face, its edges and vertices, in the metric of the face's
/// tet). Every accepted update strictly decreases a value, so the iteration
/// terminates at the fixed point of the local update operator.
class MyocardiumSolver {
 public:
  MyocardiumSolver(const VolumeMesh& vm, std::vector<Mat3> D, const EikonalOptions& opt = {});

  std::vector<double> solve(std::span<const VertexSeed> seeds) const;

  /// Containing element of p among elements whose bounding box lies within `snap_tolerance`
  /// (1e-8 barycentric slack). Points contained in none of them snap to the nearest vertex of
  /// those elements; nullopt when there are no such elements.
  std::optional<PointLocation> locate(const Vec3& p, double snap_tolerance = 2.0) const;

  /// Seeds induced by an off-node source: exact anisotropic travel time to the nodes of the
  /// containing element.
  void seeds_for_point(const Vec3& p, const PointLocation& loc, double time, std::vector<VertexSeed>& out) const;

  /// Arrival time at an off-node point from the nodes of its element, the reverse of the
  /// seeding rule: min_j field(x_j) + sqrt((p - x_j)^T D^{-1} (p - x_j)).
  double arrival_at(const Vec3& p, std::span<const double> field, const PointLocation& loc) const;

  const VolumeMesh& mesh() const { return *vm_; }
  const std::vector<Mat3>& metric() const { return D_; }

  /// Travel time across element t from a to b: sqrt((b-a)^T D_t^{-1} (b-a)).
  double element_distance(int t, const Vec3& a, const Vec3& b) const;

 private:
  const VolumeMesh* vm_;
  struct StencilFace {
    std::array<int, 3> v;
    int tet;
  };
  struct Watch {
    int target;
    int face;
  };

  void build_stencil();
  double face_update(int target, const StencilFace& f, int changed, std::span<const double> tau) const;

  std::vector<Mat3> D_;
  std::vector<Mat3> Dinv_;
  EikonalOptions opt_;
  std::vector<StencilFace> faces_;
  // watch_[watch_start_[x] .. watch_start_[x + 1]): stencil faces containing x, with their target vertex.
  std::vector<std::size_t> watch_start_;
  std::vector<Watch> watch_;
  std::vector<Mat3> vertex_metric_;  // inverse of the mean D over the incident tets, for the source ball
  // Uniform bucket grid over element bounding boxes for point location.
  Vec3 grid_origin_;
  double grid_cell_ = 1.0;
  std::array<int, 3> grid_dims_{1, 1, 1};
  std::vector<std::vector<int>> grid_;
};

/// Convenience wrapper: builds the solver and converts mixed vertex / point sources.
std::vector<double> solve_myocardium(const VolumeMesh& vm, const std::vector<Mat3>& D,
                                     std::span<const VertexSeed> seeds, const EikonalOptions& opt = {});

struct CouplingConfig {
  double cv_purkinje = 2.0;                 // m/s
  std::array<double, 2> root_times{0, 0};   // ms, {left, right}
  int max_outer_iters = 20;
  double tol = 1e-3;                        // ms

  void validate() const;
};

/// Root-time convention: positive RT delays the right tree, negative delays the left.
std::array<double, 2> root_times_from_rt(double rt);

struct ActivationField {
  std::array<std::vector<double>, 2> tau_tree;  // {left, right}, ms per tree node
  std::vector<double> tau_myo;                  // ms per volume vertex
  int iterations = 0;
  bool converged = false;
  std::vector<double> max_change;               // per outer iteration
  std::vector<int> snapped_pmjs;                // PMJs resolved by nearest-vertex snapping
};

/// Per-tree PMJ locations in the myocardial mesh; throws InputError naming the first
/// PMJ that cannot be located within the snap tolerance.
std::vector<PointLocation> locate_pmjs(const MyocardiumSolver& solver, const PurkinjeTree& tree);

using IterationObserver = std::function<void(int iteration, const ActivationField&)>;

/// Fixed-point iteration between the two trees and the myocardium, starting from
/// tau_myo = +inf, until the largest change drops below cc.tol.
ActivationField solve_coupled(const std::array<const PurkinjeTree*, 2>& trees, const MyocardiumSolver& solver,
                              const CouplingConfig& cc, const IterationObserver& observer = {});

ActivationField solve_coupled(const PurkinjeTree& left, const PurkinjeTree& right, const VolumeMesh& vm,
                              const ConductivityModel& cm, const CouplingConfig& cc);

void save_activation_csv(std::span<const double> tau, const std::filesystem::path& path);
void save_activation_vtk(const VolumeMesh& vm, std::span<const double> tau, const std::filesystem::path& path);

}  // namespace purkinje
