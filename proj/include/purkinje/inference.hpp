#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "purkinje/ecg.hpp"
#include "purkinje/gp.hpp"
#include "purkinje/tree.hpp"

namespace purkinje {

constexpr int kNumParams = 12;
/// Parameter order: l_i^L, l_i^R, l_F1^L, l_F2^L, l_F1^R, l_F2^R, alpha_F1^L, alpha_F2^L, alpha_F1^R,
/// alpha_F2^R, RT, CV.
extern const std::array<const char*, kNumParams> kParamNames;

struct ParamSpace {
  Eigen::VectorXd lower, upper;

  /// Ranges: initial lengths [30, 100] mm, fascicle lengths [2, 50] mm, fascicle angles
  /// [-pi/4, 3pi/4] rad, root time [-75, 50] ms, Purkinje velocity [2, 4] m/s.
  static ParamSpace defaults();
  void validate() const;
  bool contains(const Eigen::VectorXd& theta) const;
  int dim() const { return static_cast<int>(lower.size()); }
};

/// One stratum per axis per dimension, jittered uniformly inside the stratum.
std::vector<Eigen::VectorXd> latin_hypercube(int n, const ParamSpace& space, std::mt19937_64& rng);

/// Minimization form: (y_best - mu) Phi(z) + sigma phi(z), z = (y_best - mu) / sigma.
double expected_improvement(double mu, double var, double y_best);

struct AcquisitionOptions {
  int candidates = 10000;
  int polish = 10;
};

/// Maximizes EI over the box: uniform candidates, then coordinate-search polishing of the best ones.
Eigen::VectorXd maximize_expected_improvement(const GaussianProcess& gp, const ParamSpace& space, double y_best,
                                              const AcquisitionOptions& opt, std::mt19937_64& rng);

/// Normal density of mu at y_min with variance var + var_min.
double abc_prior_density(double mu, double var, double y_min, double var_min);

struct PriorSample {
  Eigen::VectorXd theta;
  double density;
};

struct PriorSampling {
  std::vector<PriorSample> accepted;  // sorted by descending density
  double p_max = 0.0;
  double min_variance = 0.0;
  long drawn = 0;
};

/// Draws n uniform points, accepts each when p(theta) > r, r ~ U(0, p_max), with p_max the density at
/// mu = y_min and the smallest predicted variance among the draws. Throws NumericError on zero acceptances.
PriorSampling rejection_sample_prior(const GaussianProcess& gp, const ParamSpace& space, double y_min,
                                     double var_min, long n, std::mt19937_64& rng);

/// Gaussian KDE with bandwidth from 5-fold cross-validated log likelihood over 20 log-spaced
/// multiples in [0.01, 10] of Silverman's rule.
struct GaussianKde {
  std::vector<double> samples;  // sorted ascending
  double bandwidth = 1.0;

  static GaussianKde fit(std::span<const double> samples);
  double operator()(double x) const;
};

double silverman_bandwidth(std::span<const double> samples);

/// Total variation 0.5 int |p_a - p_b| between the KDEs of two sample sets, trapezoid rule on 2048
/// points over [min(0, lo - 4h), max(1.5 max, hi + 4h)].
double tv_distance(std::span<const double> a, std::span<const double> b);

// --- identification run --------------------------------------------------------

enum class Provenance { LHS, BO, ABC };
const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct ForwardResult {
  double loss = kInf;
  double shift = 0.0;
  std::vector<double> beat_errors;  // q(e; theta)
  EcgTrace ecg;
  std::array<PurkinjeTree, 2> trees;
  double max_activation = 0.0;
  bool converged = true;
};

/// Pure function of theta; may be called concurrently.
using ForwardFn = std::function<ForwardResult(const Eigen::VectorXd&)>;

struct EvaluationRecord {
  Eigen::VectorXd theta;
  double y = kInf;
  double shift = 0.0;
  Provenance provenance = Provenance::LHS;
  std::vector<double> beat_errors;
  bool failed = false;
};

struct RunBudget {
  int n_init = 60;
  int n_bo = 60;
  long n_prior_samples = 200000;
  int n_posterior = 30;
  int retrain_after = 50;
  double accept_threshold = 0.9;
  /// Hard cap on forward evaluations during the posterior stage.
  int max_abc_evals = 600;
  int gp_restarts = 5;
  AcquisitionOptions acquisition;

  void validate() const;
};

struct EnsembleMember {
  int record = -1;
  Eigen::VectorXd theta;
  double prior_density = 0.0;
  double tv = 0.0;
  ForwardResult result;
};

enum class RunStatus { Complete, BudgetExhausted };

struct IdentificationResult {
  std::vector<EvaluationRecord> records;
  int best = -1;  // record index of theta_min
  std::vector<EnsembleMember> ensemble;
  RunStatus status = RunStatus::Complete;
  int gp_refits = 0;
  GaussianProcess gp;
};

struct RunOptions {
  /// When set, records.csv, beat_errors.csv, gp_model.json, status.json and ensemble/ are written here.
  std::optional<std::filesystem::path> out_dir;
  /// Records from an interrupted run; reused in order while their theta matches the replay exactly.
  std::vector<EvaluationRecord> cached;
  int jobs = 1;
  std::function<void(const std::string&)> log;
};

IdentificationResult run_identification(const ParamSpace& space, const ForwardFn& forward, const RunBudget& budget,
                                        std::uint64_t seed, const RunOptions& options = {});

/// records.csv: parameter columns, y, shift, provenance, failed. beat_errors.csv: record index then q.
void save_records(std::span<const EvaluationRecord> records, const std::filesystem::path& dir);
std::vector<EvaluationRecord> load_records(const std::filesystem::path& dir);

}  // namespace purkinje
