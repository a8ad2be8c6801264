#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "purkinje/common.hpp"

namespace purkinje {

/// Hyperparameters of the ARD exponential kernel eta^2 exp(-sqrt(sum_i (a_i - b_i)^2 / r_i^2)),
/// plus the observation noise variance. All live in normalized input / standardized output units.
struct GpHyperparameters {
  double eta = 1.0;
  Eigen::VectorXd r;
  double noise = 1e-4;
};

double ard_exponential(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b,
                       const GpHyperparameters& h);

struct GpPrediction {
  double mean;
  double variance;  // latent (noise-free), in loss units squared
};

/// GP regression on a box-bounded input space. Inputs are mapped to [0, 1]^d with the box, outputs
/// standardized to zero mean and unit variance.
class GaussianProcess {
 public:
  static constexpr double kJitter = 1e-8;
  static constexpr double kNoiseFloor = 1e-8;

  GaussianProcess() = default;
  GaussianProcess(Eigen::VectorXd lower, Eigen::VectorXd upper);

  /// Condition on data (raw units) with fixed hyperparameters.
  void condition(const std::vector<Eigen::VectorXd>& X, const std::vector<double>& y, const GpHyperparameters& h);

  /// Maximize the log marginal likelihood from `restarts` starting points (the first one deterministic,
  /// the rest with r_i log-uniform in [1e-2, 1e1]) and condition on the best. With `warm`, the first
  /// start is `warm` instead.
  void fit(const std::vector<Eigen::VectorXd>& X, const std::vector<double>& y, int restarts, std::mt19937_64& rng,
           const GpHyperparameters* warm = nullptr);

  GpPrediction predict(const Eigen::VectorXd& x) const;
  /// Columns of X are raw points.
  void predict_batch(const Eigen::MatrixXd& X, Eigen::VectorXd& mean, Eigen::VectorXd& variance) const;

  /// Log marginal likelihood of the current data under h (standardized units).
  double log_marginal_likelihood(const GpHyperparameters& h) const;

  bool fitted() const { return fitted_; }
  int dim() const { return static_cast<int>(lower_.size()); }
  std::size_t size() const { return static_cast<std::size_t>(Xn_.cols()); }
  const GpHyperparameters& hyper() const { return hyper_; }
  const Eigen::VectorXd& lower() const { return lower_; }
  const Eigen::VectorXd& upper() const { return upper_; }
  double y_mean() const { return y_mean_; }
  double y_scale() const { return y_scale_; }
  const Eigen::MatrixXd& normalized_inputs() const { return Xn_; }
  const Eigen::VectorXd& standardized_targets() const { return ys_; }

  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const;

  nlohmann::json to_json() const;
  static GaussianProcess from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static GaussianProcess load(const std::filesystem::path& path);

 private:
  void set_data(const std::vector<Eigen::VectorXd>& X, const std::vector<double>& y);
  void factorize();

  Eigen::VectorXd lower_, upper_;
  Eigen::MatrixXd Xn_;  // d x n normalized inputs
  Eigen::VectorXd ys_;  // standardized targets
  double y_mean_ = 0.0, y_scale_ = 1.0;
  GpHyperparameters hyper_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
  bool fitted_ = false;
};

/// Negative log marginal likelihood and its gradient with respect to
/// p = (log eta, log r_1..log r_d, log(noise - floor)). Exposed for tests.
double gp_nll_and_gradient(const Eigen::MatrixXd& Xn, const Eigen::VectorXd& y, const Eigen::VectorXd& p,
                           Eigen::VectorXd* grad);

}  // namespace purkinje
