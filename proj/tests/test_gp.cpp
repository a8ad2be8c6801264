#include <doctest.h>

#include <filesystem>
#include <random>

#include <nlohmann/json.hpp>

#include "purkinje/gp.hpp"

using namespace purkinje;

namespace {

struct Data {
  std::vector<Eigen::VectorXd> X;
  std::vector<double> y;
};

Data sample(int n, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Data d;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x(lo.size());
    for (Eigen::Index k = 0; k < lo.size(); ++k) x[k] = lo[k] + u(rng) * (hi[k] - lo[k]);
    const Eigen::VectorXd z = ((x - lo).array() / (hi - lo).array()).matrix();
    d.X.push_back(x);
    d.y.push_back(std::sin(3.0 * z[0]) + 0.5 * z[1] * z[1] + (z.size() > 2 ? 0.1 * z[2] : 0.0));
  }
  return d;
}

}  // namespace

TEST_CASE("ARD exponential kernel values") {
  GpHyperparameters h;
  h.eta = 2.0;
  h.r = Eigen::Vector2d(1.0, 2.0);
  CHECK(ard_exponential(Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 2), h) == doctest::Approx(4.0 * std::exp(-std::sqrt(2.0))).epsilon(1e-15));
  CHECK(ard_exponential(Eigen::Vector2d(3, 3), Eigen::Vector2d(3, 3), h) == 4.0);
  CHECK(ard_exponential(Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 1), h) == ard_exponential(Eigen::Vector2d(0, 1), Eigen::Vector2d(0, 0), h));
}

TEST_CASE("predictions match the dense linear-algebra oracle") {
  std::mt19937_64 rng(4);
  const Eigen::Vector3d lo(-1.0, 10.0, 0.0), hi(2.0, 30.0, 0.5);
  auto d = sample(40, lo, hi, rng);
  GpHyperparameters h;
  h.eta = 1.3;
  h.r = Eigen::Vector3d(0.4, 0.9, 2.0);
  h.noise = 1e-3;
  GaussianProcess gp(lo, hi);
  gp.condition(d.X, d.y, h);

  // Oracle: explicit inverse of the covariance of standardized targets.
  const int n = 40;
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(d.y.data(), n);
  const double mean = y.mean();
  const double sd = std::sqrt((y.array() - mean).square().mean());
  const Eigen::VectorXd ys = (y.array() - mean) / sd;
  auto z = [&](const Eigen::VectorXd& x) { return Eigen::VectorXd((x - lo).array() / (hi - lo).array()); };
  auto k = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return h.eta * h.eta * std::exp(-((z(a) - z(b)).array() / h.r.array()).matrix().norm());
  };
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) K(i, j) = k(d.X[i], d.X[j]) + (i == j ? h.noise + GaussianProcess::kJitter : 0.0);
  const Eigen::MatrixXd Kinv = K.fullPivLu().inverse();

  auto test = sample(25, lo, hi, rng);
  test.X.push_back(d.X[3]);
  for (const auto& x : test.X) {
    Eigen::VectorXd ks(n);
    for (int i = 0; i < n; ++i) ks[i] = k(d.X[i], x);
    const double mu = mean + sd * ks.dot(Kinv * ys);
    const double var = sd * sd * (h.eta * h.eta - ks.dot(Kinv * ks));
    auto p = gp.predict(x);
    CHECK(std::abs(p.mean - mu) < 1e-10);
    CHECK(std::abs(p.variance - var) < 1e-10);
  }
  // Standardized log marginal likelihood.
  const double lml = -0.5 * ys.dot(Kinv * ys) - 0.5 * std::log(K.determinant()) - 0.5 * n * std::log(2.0 * kPi);
  CHECK(gp.log_marginal_likelihood(h) == doctest::Approx(lml).epsilon(1e-10));

  Eigen::MatrixXd Q(3, static_cast<Eigen::Index>(test.X.size()));
  for (std::size_t j = 0; j < test.X.size(); ++j) Q.col(static_cast<Eigen::Index>(j)) = test.X[j];
  Eigen::VectorXd m, v;
  gp.predict_batch(Q, m, v);
  for (std::size_t j = 0; j < test.X.size(); ++j) {
    auto p = gp.predict(test.X[j]);
    CHECK(std::abs(m[static_cast<Eigen::Index>(j)] - p.mean) < 1e-12);
    CHECK(std::abs(v[static_cast<Eigen::Index>(j)] - p.variance) < 1e-12);
  }
}

TEST_CASE("negative log likelihood gradient matches central differences") {
  std::mt19937_64 rng(8);
  const Eigen::Vector3d lo = Eigen::Vector3d::Zero(), hi = Eigen::Vector3d::Ones();
  auto d = sample(25, lo, hi, rng);
  Eigen::MatrixXd Xn(3, 25);
  Eigen::VectorXd y(25);
  for (int i = 0; i < 25; ++i) Xn.col(i) = d.X[i], y[i] = d.y[i];
  y = (y.array() - y.mean()).matrix();
  Eigen::VectorXd p(5);
  p << 0.2, std::log(0.3), std::log(0.8), std::log(1.7), std::log(1e-3);
  Eigen::VectorXd g;
  gp_nll_and_gradient(Xn, y, p, &g);
  for (int k = 0; k < 5; ++k) {
    const double h = 1e-6;
    Eigen::VectorXd a = p, b = p;
    a[k] += h;
    b[k] -= h;
    const double fd = (gp_nll_and_gradient(Xn, y, a, nullptr) - gp_nll_and_gradient(Xn, y, b, nullptr)) / (2.0 * h);
    CHECK(g[k] == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
  }
}

TEST_CASE("fitting finds irrelevant inputs and does not lose likelihood") {
  std::mt19937_64 rng(12);
  const Eigen::Vector3d lo = Eigen::Vector3d::Zero(), hi = Eigen::Vector3d::Ones();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Data d;
  for (int i = 0; i < 60; ++i) {
    Eigen::Vector3d x(u(rng), u(rng), u(rng));
    d.X.push_back(x);
    d.y.push_back(std::sin(4.0 * x[0]));
  }
  GaussianProcess gp(lo, hi);
  gp.fit(d.X, d.y, 3, rng);
  CHECK(gp.fitted());
  CHECK(gp.hyper().r[1] > 5.0 * gp.hyper().r[0]);
  CHECK(gp.hyper().r[2] > 5.0 * gp.hyper().r[0]);
  GpHyperparameters start;
  start.r = Eigen::Vector3d::Constant(0.5);
  CHECK(gp.log_marginal_likelihood(gp.hyper()) >= gp.log_marginal_likelihood(start));
  CHECK(gp.hyper().noise >= GaussianProcess::kNoiseFloor);
  CHECK(gp.predict(Eigen::Vector3d(0.3, 0.9, 0.1)).mean == doctest::Approx(std::sin(1.2)).epsilon(0.05));

  // A warm start at the optimum stays there.
  GaussianProcess warm(lo, hi);
  const auto h = gp.hyper();
  warm.fit(d.X, d.y, 1, rng, &h);
  CHECK(warm.log_marginal_likelihood(warm.hyper()) == doctest::Approx(gp.log_marginal_likelihood(h)).epsilon(1e-6));
}

TEST_CASE("degenerate training sets") {
  std::mt19937_64 rng(1);
  const Eigen::Vector2d lo(0, 0), hi(1, 1);
  std::vector<Eigen::VectorXd> X{Eigen::Vector2d(0.1, 0.2), Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.9, 0.3)};
  GaussianProcess c(lo, hi);
  c.fit(X, {2.5, 2.5, 2.5}, 2, rng);
  CHECK(c.y_scale() == 1.0);
  CHECK(c.predict(Eigen::Vector2d(0.7, 0.7)).mean == doctest::Approx(2.5).epsilon(1e-12));

  X.push_back(X[1]);
  GaussianProcess dup(lo, hi);
  dup.fit(X, {0.0, 1.0, 0.3, 2.0}, 2, rng);
  CHECK(dup.hyper().noise > 1e-3);

  GaussianProcess bad(lo, hi);
  CHECK_THROWS_AS(bad.fit({X[0]}, {1.0}, 1, rng), InputError);
  CHECK_THROWS_AS(bad.predict(X[0]), InputError);
  CHECK_THROWS_AS(GaussianProcess(lo, Eigen::Vector2d(1, 0)), InputError);
}

TEST_CASE("GP JSON round trip reproduces predictions exactly") {
  std::mt19937_64 rng(30);
  const Eigen::Vector3d lo(0, 0, 0), hi(5, 5, 5);
  auto d = sample(20, lo, hi, rng);
  GaussianProcess gp(lo, hi);
  gp.fit(d.X, d.y, 2, rng);
  auto path = std::filesystem::temp_directory_path() / "purkinje_test_gp.json";
  gp.save(path);
  auto back = GaussianProcess::load(path);
  for (const auto& x : sample(10, lo, hi, rng).X) {
    CHECK(back.predict(x).mean == gp.predict(x).mean);
    CHECK(back.predict(x).variance == gp.predict(x).variance);
  }
}
