#include "purkinje/gp.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

namespace purkinje {

double ard_exponential(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b,
                       const GpHyperparameters& h) {
  const double rho = ((a - b).array() / h.r.array()).matrix().norm();
  return h.eta * h.eta * std::exp(-rho);
}

namespace {

constexpr double kLogBound = 7.0;  // soft box on every log-hyperparameter

GpHyperparameters unpack(const Eigen::VectorXd& p) {
  GpHyperparameters h;
  const int d = static_cast<int>(p.size()) - 2;
  h.eta = std::exp(p[0]);
  h.r = p.segment(1, d).array().exp();
  h.noise = GaussianProcess::kNoiseFloor + std::exp(p[d + 1]);
  return h;
}

Eigen::VectorXd pack(const GpHyperparameters& h) {
  const int d = static_cast<int>(h.r.size());
  Eigen::VectorXd p(d + 2);
  p[0] = std::log(h.eta);
  p.segment(1, d) = h.r.array().log();
  p[d + 1] = std::log(std::max(h.noise - GaussianProcess::kNoiseFloor, 1e-300));
  return p;
}

Eigen::MatrixXd gram(const Eigen::MatrixXd& Xn, const GpHyperparameters& h) {
  const Eigen::Index n = Xn.cols();
  Eigen::MatrixXd K(n, n);
  const Eigen::ArrayXd inv_r = h.r.array().inverse();
  for (Eigen::Index j = 0; j < n; ++j) {
    K(j, j) = h.eta * h.eta;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double rho = ((Xn.col(i) - Xn.col(j)).array() * inv_r).matrix().norm();
      K(i, j) = K(j, i) = h.eta * h.eta * std::exp(-rho);
    }
  }
  return K;
}

}  // namespace

double gp_nll_and_gradient(const Eigen::MatrixXd& Xn, const Eigen::VectorXd& y, const Eigen::VectorXd& p,
                           Eigen::VectorXd* grad) {
  const Eigen::Index n = Xn.cols(), d = Xn.rows();
  const GpHyperparameters h = unpack(p);
  const Eigen::MatrixXd Kf = gram(Xn, h);
  Eigen::MatrixXd K = Kf;
  K.diagonal().array() += h.noise + GaussianProcess::kJitter;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) return kInf;
  const Eigen::VectorXd alpha = llt.solve(y);
  double nll = 0.5 * y.dot(alpha) + 0.5 * static_cast<double>(n) * std::log(2.0 * kPi);
  for (Eigen::Index i = 0; i < n; ++i) nll += std::log(llt.matrixL()(i, i));

  // Quadratic penalty outside the soft box keeps the search away from degenerate scales.
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double excess = std::abs(p[k]) - kLogBound;
    if (excess > 0) nll += 10.0 * excess * excess;
  }
  if (!grad) return nll;

  // dNLL/dp = 0.5 tr(W dK/dp), W = K^-1 - alpha alpha^T.
  Eigen::MatrixXd W = llt.solve(Eigen::MatrixXd::Identity(n, n));
  W.noalias() -= alpha * alpha.transpose();
  grad->setZero(p.size());
  (*grad)[0] = (W.array() * Kf.array()).sum();  // dK/dlog(eta) = 2 Kf, times 0.5
  const Eigen::ArrayXd inv_r2 = h.r.array().inverse().square();
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const Eigen::ArrayXd sq = (Xn.col(i) - Xn.col(j)).array().square() * inv_r2;
      const double rho = std::sqrt(sq.sum());
      if (rho <= 0.0) continue;  // self-pairs and duplicates: kernel not differentiable at 0
      // dK_ij/dlog r_k = K_ij * sq_k / rho; both (i,j) and (j,i) contribute, times 0.5.
      grad->segment(1, d) += (W(i, j) * Kf(i, j) / rho) * sq.matrix();
    }
  (*grad)[d + 1] = 0.5 * W.trace() * std::exp(p[d + 1]);
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double excess = std::abs(p[k]) - kLogBound;
    if (excess > 0) (*grad)[k] += 20.0 * excess * (p[k] > 0 ? 1.0 : -1.0);
  }
  return nll;
}

GaussianProcess::GaussianProcess(Eigen::VectorXd lower, Eigen::VectorXd upper)
    : lower_(std::move(lower)), upper_(std::move(upper)) {
  if (lower_.size() != upper_.size() || lower_.size() == 0) throw InputError("GP bounds must be non-empty and matching");
  for (Eigen::Index i = 0; i < lower_.size(); ++i)
    if (!(upper_[i] > lower_[i])) throw InputError("GP bounds must be non-empty intervals");
}

Eigen::VectorXd GaussianProcess::normalize(const Eigen::VectorXd& x) const {
  return ((x - lower_).array() / (upper_ - lower_).array()).matrix();
}

void GaussianProcess::set_data(const std::vector<Eigen::VectorXd>& X, const std::vector<double>& y) {
  if (X.size() != y.size()) throw InputError("GP inputs and targets differ in length");
  if (X.size() < 2) throw InputError("GP needs at least two training points");
  const Eigen::Index n = static_cast<Eigen::Index>(X.size());
  Xn_.resize(dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (X[i].size() != dim()) throw InputError("GP input has the wrong dimension");
    Xn_.col(i) = normalize(X[i]);
  }
  ys_ = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
  if (!ys_.allFinite()) throw InputError("GP targets must be finite");
  y_mean_ = ys_.mean();
  const double var = (ys_.array() - y_mean_).square().sum() / static_cast<double>(n);
  y_scale_ = var > 0.0 ? std::sqrt(var) : 1.0;
  ys_ = (ys_.array() - y_mean_) / y_scale_;
}

void GaussianProcess::factorize() {
  Eigen::MatrixXd K = gram(Xn_, hyper_);
  K.diagonal().array() += hyper_.noise + kJitter;
  llt_.compute(K);
  if (llt_.info() != Eigen::Success) throw NumericError("GP kernel matrix is not positive definite");
  alpha_ = llt_.solve(ys_);
  fitted_ = true;
}

void GaussianProcess::condition(const std::vector<Eigen::VectorXd>& X, const std::vector<double>& y,
                                const GpHyperparameters& h) {
  if (h.r.size() != dim()) throw InputError("GP length-scale vector has the wrong dimension");
  if (!(h.eta > 0.0) || !(h.r.array() > 0.0).all()) throw InputError("GP hyperparameters must be positive");
  set_data(X, y);
  hyper_ = h;
  hyper_.noise = std::max(h.noise, kNoiseFloor);
  factorize();
}

namespace {

struct Problem {
  const Eigen::MatrixXd* Xn;
  const Eigen::VectorXd* y;
};

double gsl_f(const gsl_vector* v, void* params) {
  auto* pr = static_cast<Problem*>(params);
  Eigen::Map<const Eigen::VectorXd> p(v->data, static_cast<Eigen::Index>(v->size));
  double f = gp_nll_and_gradient(*pr->Xn, *pr->y, p, nullptr);
  return std::isfinite(f) ? f : GSL_POSINF;
}

void gsl_df(const gsl_vector* v, void* params, gsl_vector* df) {
  auto* pr = static_cast<Problem*>(params);
  Eigen::Map<const Eigen::VectorXd> p(v->data, static_cast<Eigen::Index>(v->size));
  Eigen::VectorXd g;
  double f = gp_nll_and_gradient(*pr->Xn, *pr->y, p, &g);
  for (std::size_t k = 0; k < v->size; ++k) gsl_vector_set(df, k, std::isfinite(f) ? g[k] : 0.0);
}

void gsl_fdf(const gsl_vector* v, void* params, double* f, gsl_vector* df) {
  auto* pr = static_cast<Problem*>(params);
  Eigen::Map<const Eigen::VectorXd> p(v->data, static_cast<Eigen::Index>(v->size));
  Eigen::VectorXd g;
  double val = gp_nll_and_gradient(*pr->Xn, *pr->y, p, &g);
  *f = std::isfinite(val) ? val : GSL_POSINF;
  for (std::size_t k = 0; k < v->size; ++k) gsl_vector_set(df, k, std::isfinite(val) ? g[k] : 0.0);
}

// Local BFGS from p0; returns the best point visited and its NLL.
std::pair<Eigen::VectorXd, double> minimize(Problem& pr, const Eigen::VectorXd& p0) {
  const std::size_t n = static_cast<std::size_t>(p0.size());
  gsl_multimin_function_fdf fn{gsl_f, gsl_df, gsl_fdf, n, &pr};
  gsl_vector* x = gsl_vector_alloc(n);
  for (std::size_t k = 0; k < n; ++k) gsl_vector_set(x, k, p0[static_cast<Eigen::Index>(k)]);
  gsl_multimin_fdfminimizer* s = gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, n);
  Eigen::VectorXd best = p0;
  double best_f = gsl_f(x, &pr);
  if (std::isfinite(best_f) && gsl_multimin_fdfminimizer_set(s, &fn, x, 0.1, 0.1) == GSL_SUCCESS) {
    for (int it = 0; it < 200; ++it) {
      if (gsl_multimin_fdfminimizer_iterate(s) != GSL_SUCCESS) break;
      if (s->f < best_f) {
        best_f = s->f;
        for (std::size_t k = 0; k < n; ++k) best[static_cast<Eigen::Index>(k)] = gsl_vector_get(s->x, k);
      }
      if (gsl_multimin_test_gradient(s->gradient, 1e-5) == GSL_SUCCESS) break;
    }
  }
  gsl_multimin_fdfminimizer_free(s);
  gsl_vector_free(x);
  return {best, best_f};
}

}  // namespace

void GaussianProcess::fit(const std::vector<Eigen::VectorXd>& X, const std::vector<double>& y, int restarts,
                          std::mt19937_64& rng, const GpHyperparameters* warm) {
  if (restarts < 1) throw InputError("GP fit needs at least one restart");
  set_data(X, y);
  gsl_set_error_handler_off();
  Problem pr{&Xn_, &ys_};
  std::uniform_real_distribution<double> u(std::log(1e-2), std::log(1e1));
  std::uniform_real_distribution<double> un(std::log(1e-6), std::log(1e-1));
  Eigen::VectorXd best;
  double best_f = kInf;
  int failures = 0;
  for (int k = 0; k < restarts; ++k) {
    GpHyperparameters h0;
    h0.r = Eigen::VectorXd::Constant(dim(), 0.5);
    h0.noise = 1e-4;
    if (k == 0 && warm) {
      h0 = *warm;
      h0.noise = std::max(h0.noise, 2.0 * kNoiseFloor);
    } else if (k > 0) {
      for (Eigen::Index i = 0; i < dim(); ++i) h0.r[i] = std::exp(u(rng));
      h0.noise = std::exp(un(rng));
    }
    auto [p, f] = minimize(pr, pack(h0));
    if (!std::isfinite(f)) {
      ++failures;
      continue;
    }
    if (f < best_f) best_f = f, best = p;
  }
  if (!std::isfinite(best_f))
    throw NumericError("GP fit failed: no restart produced a positive definite kernel (" + std::to_string(failures) +
                       " of " + std::to_string(restarts) + " restarts failed)");
  hyper_ = unpack(best);
  factorize();
}

double GaussianProcess::log_marginal_likelihood(const GpHyperparameters& h) const {
  if (Xn_.cols() == 0) throw InputError("GP has no data");
  Eigen::MatrixXd K = gram(Xn_, h);
  K.diagonal().array() += std::max(h.noise, kNoiseFloor) + kJitter;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) return -kInf;
  double ll = -0.5 * ys_.dot(llt.solve(ys_)) - 0.5 * static_cast<double>(ys_.size()) * std::log(2.0 * kPi);
  for (Eigen::Index i = 0; i < ys_.size(); ++i) ll -= std::log(llt.matrixL()(i, i));
  return ll;
}

GpPrediction GaussianProcess::predict(const Eigen::VectorXd& x) const {
  Eigen::VectorXd m, v;
  Eigen::MatrixXd X = x;
  predict_batch(X, m, v);
  return {m[0], v[0]};
}

void GaussianProcess::predict_batch(const Eigen::MatrixXd& X, Eigen::VectorXd& mean, Eigen::VectorXd& variance) const {
  if (!fitted_) throw InputError("GP is not fitted");
  if (X.rows() != dim()) throw InputError("GP query has the wrong dimension");
  const Eigen::Index n = Xn_.cols(), m = X.cols();
  const Eigen::ArrayXd inv_r = hyper_.r.array().inverse();
  const Eigen::ArrayXd inv_w = (upper_ - lower_).array().inverse();
  const double eta2 = hyper_.eta * hyper_.eta;
  Eigen::MatrixXd Ks(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const Eigen::ArrayXd xn = (X.col(j) - lower_).array() * inv_w;
    for (Eigen::Index i = 0; i < n; ++i)
      Ks(i, j) = eta2 * std::exp(-std::sqrt(((Xn_.col(i).array() - xn) * inv_r).square().sum()));
  }
  mean = (Ks.transpose() * alpha_).array() * y_scale_ + y_mean_;
  llt_.matrixL().solveInPlace(Ks);
  variance = (eta2 - Ks.colwise().squaredNorm().transpose().array()).matrix();
  for (Eigen::Index j = 0; j < m; ++j) {
    double v = variance[j];
    if (v < 0.0) v = 0.0;  // rounding below zero
    variance[j] = v * y_scale_ * y_scale_;
  }
}

nlohmann::json GaussianProcess::to_json() const {
  nlohmann::json j;
  j["lower"] = std::vector<double>(lower_.data(), lower_.data() + lower_.size());
  j["upper"] = std::vector<double>(upper_.data(), upper_.data() + upper_.size());
  nlohmann::json xs = nlohmann::json::array();
  for (Eigen::Index i = 0; i < Xn_.cols(); ++i)
    xs.push_back(std::vector<double>(Xn_.col(i).data(), Xn_.col(i).data() + Xn_.rows()));
  j["x_normalized"] = xs;
  j["y_standardized"] = std::vector<double>(ys_.data(), ys_.data() + ys_.size());
  j["y_mean"] = y_mean_;
  j["y_scale"] = y_scale_;
  j["eta"] = hyper_.eta;
  j["r"] = std::vector<double>(hyper_.r.data(), hyper_.r.data() + hyper_.r.size());
  j["noise"] = hyper_.noise;
  j["jitter"] = kJitter;
  return j;
}

GaussianProcess GaussianProcess::from_json(const nlohmann::json& j) {
  try {
    auto lo = j.at("lower").get<std::vector<double>>(), hi = j.at("upper").get<std::vector<double>>();
    GaussianProcess gp(Eigen::Map<Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size())),
                       Eigen::Map<Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size())));
    const auto xs = j.at("x_normalized").get<std::vector<std::vector<double>>>();
    auto ys = j.at("y_standardized").get<std::vector<double>>();
    gp.Xn_.resize(gp.dim(), static_cast<Eigen::Index>(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (static_cast<int>(xs[i].size()) != gp.dim()) throw InputError("GP checkpoint input has the wrong dimension");
      gp.Xn_.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(xs[i].data(), gp.dim());
    }
    gp.ys_ = Eigen::Map<Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
    gp.y_mean_ = j.at("y_mean").get<double>();
    gp.y_scale_ = j.at("y_scale").get<double>();
    gp.hyper_.eta = j.at("eta").get<double>();
    auto r = j.at("r").get<std::vector<double>>();
    gp.hyper_.r = Eigen::Map<Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
    gp.hyper_.noise = j.at("noise").get<double>();
    if (gp.hyper_.r.size() != gp.dim() || gp.ys_.size() != gp.Xn_.cols())
      throw InputError("GP checkpoint has inconsistent sizes");
    gp.factorize();
    return gp;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed GP checkpoint: ") + e.what());
  }
}

void GaussianProcess::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

GaussianProcess GaussianProcess::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace purkinje
