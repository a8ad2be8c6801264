#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "purkinje/activation.hpp"
#include "purkinje/ecg.hpp"
#include "purkinje/inference.hpp"
#include "purkinje/mesh.hpp"
#include "purkinje/tree.hpp"

namespace purkinje {

enum class FitMode { Synthetic, Beats };

/// Everything a run depends on. Parsed from a single JSON document; every key is optional and
/// missing keys take the defaults below. Unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 1;
  int jobs = 1;
  FitMode mode = FitMode::Synthetic;

  // Anatomy: the bundled fixture unless all three mesh paths are given.
  double fixture_voxel = 6.0;
  int fixture_surface_rings = 24;
  std::optional<std::filesystem::path> left_endocardium, right_endocardium, myocardium;
  std::optional<std::array<Vec3, kNumElectrodes>> electrodes;

  TreeGrowthConfig tree_left, tree_right;  // shared constants, per-ventricle root and direction
  ConductivityModel conductivity;
  ActionPotentialTemplate action_potential;
  int max_outer_iters = 20;
  double coupling_tol = 1e-3;
  EikonalOptions eikonal;

  double dt = 1.0;
  double horizon = 400.0;
  double max_shift = 50.0;
  /// Multiplies simulated traces to bring them into reference units.
  double lead_gain = 1.0;

  ParamSpace bounds = ParamSpace::defaults();
  RunBudget budget;

  // Synthetic mode: reference from theta_true, pseudo-beats with per-lead iid noise.
  Eigen::VectorXd theta_true;
  int n_beats = 20;
  double noise_fraction = 0.02;

  // Beats mode: directory written by ingest-beats.
  std::optional<std::filesystem::path> beats_directory;
  double qrs_onset = 50.0;

  RunConfig();
  /// Relative paths resolve against `base`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  nlohmann::json to_json() const;
  void validate() const;
};

RunConfig load_config(const std::filesystem::path& path);
/// Synthetic ground truth: l_i 35.93/79.86 mm, fascicles 9.42/18.25 (LV) and 43.41/11.59 mm (RV),
/// angles 1.44/2.36 (LV) and 2.36/2.36 rad (RV), RT -75 ms, CV 2 m/s.
Eigen::VectorXd default_true_theta();

/// Parameter vector from a JSON array (kParamNames order) or an object keyed by parameter name.
Eigen::VectorXd theta_from_json(const nlohmann::json& j, const Eigen::VectorXd& defaults);
nlohmann::json theta_to_json(const Eigen::VectorXd& theta);

struct Anatomy {
  SurfaceMesh left_endo, right_endo;
  VolumeMesh myocardium;
  std::array<Vec3, kNumElectrodes> electrodes;
  FlatMap left_flat, right_flat;
};

Anatomy load_anatomy(const RunConfig& cfg);

struct Simulation {
  std::array<PurkinjeTree, 2> trees;
  ActivationField activation;
  EcgTrace ecg;  // reference units (lead_gain applied), not normalized
  double max_activation = 0.0;
};

struct Reference {
  EcgTrace ecg;              // normalized
  std::vector<EcgTrace> beats;  // normalized, sharing the reference QRS window
  double scale = 1.0;        // the factor that normalized them
};

/// theta -> trees -> coupled activation -> ECG, with the fixed pieces (flat maps, eikonal metric,
/// lead fields) built once. simulate() and evaluate() are safe to call concurrently.
class ForwardModel {
 public:
  ForwardModel(const RunConfig& cfg, Anatomy anatomy);

  /// Throws NumericError when the coupled iteration does not converge and `require_convergence` is set.
  Simulation simulate(const Eigen::VectorXd& theta, bool require_convergence = true) const;

  void set_reference(Reference ref);
  const Reference& reference() const { return ref_; }
  /// Loss, alignment and beat errors against the reference; the ECG is normalized.
  ForwardResult evaluate(const Eigen::VectorXd& theta) const;

  const Anatomy& anatomy() const { return anatomy_; }
  const RunConfig& config() const { return cfg_; }

 private:
  RunConfig cfg_;
  Anatomy anatomy_;
  std::unique_ptr<MyocardiumSolver> solver_;
  LeadFieldSet leads_;
  Reference ref_;
};

/// Reference from theta_true; beats add N(0, (noise_fraction * peak_l)^2) per lead and sample.
Reference make_synthetic_reference(const ForwardModel& model, const Eigen::VectorXd& theta_true, int n_beats,
                                   double noise_fraction, std::mt19937_64& rng);
/// Reference from an ingest-beats directory: the mean beat and the individual beats, shifted so the
/// detected QRS onset lands near `qrs_onset` on the simulation grid.
Reference load_beats_reference(const std::filesystem::path& dir, double qrs_onset, double dt);
Reference build_reference(const ForwardModel& model);

/// `path` if it does not exist, else the first of path-1, path-2, ... that does not.
std::filesystem::path versioned_path(const std::filesystem::path& path);

// --- beat ingestion --------------------------------------------------------------

/// Subtracts per lead the line through the means of the first and last 10 samples.
void detrend(EcgTrace& beat);
/// Sample index of max |lead II|.
std::size_t r_peak(const EcgTrace& beat);

struct BeatSet {
  std::vector<EcgTrace> beats;  // detrended, aligned on the R peak, equal length
  EcgTrace mean, lower, upper;  // per-lead mean and min / max envelope
  std::size_t r_index = 0;
};

BeatSet ingest_beats(std::vector<EcgTrace> raw);

// --- commands --------------------------------------------------------------------

using Logger = std::function<void(const std::string&)>;

void cmd_flatten(const std::filesystem::path& surface, const std::filesystem::path& out);
/// Writes tree_left.json, tree_right.json and their OBJ polylines into a new directory.
std::filesystem::path cmd_grow(const RunConfig& cfg, const Eigen::VectorXd& theta, const std::filesystem::path& out);
/// ecg.csv, activation.csv, activation.vtk, tree JSON and summary.json. Non-convergence writes the
/// summary and then throws NumericError.
std::filesystem::path cmd_forward(const RunConfig& cfg, const Eigen::VectorXd& theta, const std::filesystem::path& out);

struct FitOutcome {
  std::filesystem::path run_dir;
  RunStatus status = RunStatus::Complete;
  bool resumed = false;
  IdentificationResult result;
};

/// Resumes `out` when it holds an unfinished run with the same configuration; otherwise starts a
/// fresh run in versioned_path(out).
FitOutcome cmd_fit(const RunConfig& cfg, const std::filesystem::path& out, const Logger& log = {});

struct PacedMember {
  std::string name;
  Eigen::VectorXd theta;
  double max_activation_fitted = 0.0;
  double max_activation_paced = 0.0;
};

struct PaceSummary {
  std::filesystem::path out_dir;
  std::vector<PacedMember> members;
  /// Members at the minimum, median and maximum paced maximum activation time.
  std::array<std::size_t, 3> selection{};
};

/// Re-solves every ensemble member of a run with RT = 0; writes into run_dir/pacing (versioned).
PaceSummary cmd_pace(const std::filesystem::path& run_dir, const Logger& log = {});

/// Reads every *.csv in `in_dir` (sorted by name) and writes beat_NNN.csv, mean.csv, lower.csv,
/// upper.csv and beats.json into a new directory.
std::filesystem::path cmd_ingest_beats(const std::filesystem::path& in_dir, const std::filesystem::path& out);

/// Writes the bundled anatomy (OBJ surfaces, volume mesh, electrodes) and a config pointing at it.
std::filesystem::path cmd_fixtures(const std::filesystem::path& out, double voxel = 6.0, int surface_rings = 24);

}  // namespace purkinje
