#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>

#include "purkinje/inference.hpp"

using namespace purkinje;
namespace fs = std::filesystem;

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Loss depends on RT and CV only; the beat errors are the loss plus fixed offsets.
struct Toy {
  double spread = 0.02;
  std::atomic<int> calls{0};
  ParamSpace space = ParamSpace::defaults();

  ForwardResult operator()(const Eigen::VectorXd& theta) {
    ++calls;
    const Eigen::VectorXd z = ((theta - space.lower).array() / (space.upper - space.lower).array()).matrix();
    ForwardResult r;
    r.loss = std::pow(z[10] - 0.3, 2) + std::pow(z[11] - 0.6, 2);
    for (int k = 0; k < 20; ++k) r.beat_errors.push_back(r.loss + spread * (k % 10) / 9.0 + 1e-3 * k);
    return r;
  }
};

RunBudget small_budget() {
  RunBudget b;
  b.n_init = 20;
  b.n_bo = 10;
  b.n_prior_samples = 20000;
  b.n_posterior = 8;
  b.retrain_after = 20;
  b.max_abc_evals = 200;
  b.gp_restarts = 2;
  b.acquisition = {2000, 2};
  return b;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("parameter space defaults and validation") {
  auto s = ParamSpace::defaults();
  CHECK(s.dim() == kNumParams);
  CHECK(s.lower[10] == -75.0);
  CHECK(s.upper[11] == 4.0);
  CHECK(s.upper[6] == doctest::Approx(3.0 * kPi / 4.0));
  CHECK(s.contains(0.5 * (s.lower + s.upper)));
  CHECK_FALSE(s.contains(s.upper * 2.0));
  ParamSpace bad = s;
  bad.upper[3] = bad.lower[3];
  CHECK_THROWS_AS(bad.validate(), InputError);
}

TEST_CASE("Latin hypercube: one point per stratum in every dimension") {
  std::mt19937_64 rng(3);
  auto s = ParamSpace::defaults();
  const int n = 37;
  auto pts = latin_hypercube(n, s, rng);
  REQUIRE(pts.size() == static_cast<std::size_t>(n));
  for (int k = 0; k < s.dim(); ++k) {
    std::vector<int> count(n, 0);
    for (const auto& p : pts) {
      const double z = (p[k] - s.lower[k]) / (s.upper[k] - s.lower[k]);
      REQUIRE(z >= 0.0);
      REQUIRE(z < 1.0);
      ++count[static_cast<int>(z * n)];
    }
    for (int c : count) CHECK(c == 1);
  }
  std::mt19937_64 a(9), b(9);
  CHECK(latin_hypercube(5, s, a)[4] == latin_hypercube(5, s, b)[4]);

  // Pooled within-stratum positions are uniform (chi-square over 10 bins, 1000 draws).
  std::mt19937_64 rng2(17);
  std::vector<int> bins(10, 0);
  ParamSpace unit{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)};
  for (int rep = 0; rep < 100; ++rep)
    for (const auto& p : latin_hypercube(10, unit, rng2)) ++bins[static_cast<int>((p[0] * 10 - std::floor(p[0] * 10)) * 10)];
  double chi2 = 0.0;
  for (int c : bins) chi2 += (c - 100.0) * (c - 100.0) / 100.0;
  CHECK(chi2 < 27.9);  // 0.999 quantile, 9 dof
}

TEST_CASE("expected improvement: closed form, limits and Monte Carlo") {
  CHECK(expected_improvement(1.0, 0.0, 1.0) == 0.0);
  CHECK(expected_improvement(0.5, 0.0, 1.0) == 0.5);
  CHECK(expected_improvement(2.0, 0.0, 1.0) == 0.0);
  CHECK(expected_improvement(1.0, 4.0, 1.0) == doctest::Approx(2.0 / std::sqrt(2.0 * kPi)).epsilon(1e-14));
  std::mt19937_64 rng(44);
  std::uniform_real_distribution<double> u(-1.0, 1.0), us(0.1, 1.0);
  for (int t = 0; t < 10; ++t) {
    const double mu = u(rng), sigma = us(rng), yb = u(rng);
    std::normal_distribution<double> f(mu, sigma);
    double acc = 0.0;
    const int n = 400000;
    for (int i = 0; i < n; ++i) acc += std::max(yb - f(rng), 0.0);
    const double mc = acc / n;
    CHECK(expected_improvement(mu, sigma * sigma, yb) == doctest::Approx(mc).epsilon(0.02));
  }
}

TEST_CASE("acquisition maximization prefers low mean and high variance") {
  ParamSpace s{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)};
  std::vector<Eigen::VectorXd> X;
  std::vector<double> y;
  for (int i = 0; i <= 10; ++i) {
    X.push_back(Eigen::VectorXd::Constant(1, i / 10.0));
    y.push_back(std::pow(i / 10.0 - 0.63, 2));
  }
  GaussianProcess gp(s.lower, s.upper);
  GpHyperparameters h;
  h.r = Eigen::VectorXd::Constant(1, 0.5);
  h.noise = 1e-8;
  gp.condition(X, y, h);
  std::mt19937_64 rng(1);
  auto x = maximize_expected_improvement(gp, s, *std::min_element(y.begin(), y.end()), {500, 3}, rng);
  CHECK(s.contains(x));
  CHECK(std::abs(x[0] - 0.63) < 0.1);
  for (const auto& xi : X) CHECK(x != xi);
}

TEST_CASE("prior density is the paper's Gaussian in the surrogate mean") {
  CHECK(abc_prior_density(0.2, 0.01, 0.2, 0.01) == doctest::Approx(1.0 / std::sqrt(2.0 * kPi * 0.02)).epsilon(1e-14));
  double prev = kInf;
  for (double mu = 0.2; mu < 1.0; mu += 0.1) {
    const double p = abc_prior_density(mu, 0.01, 0.2, 0.01);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("rejection sampling follows min(p / p_max, 1)") {
  ParamSpace s{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)};
  std::vector<Eigen::VectorXd> X;
  std::vector<double> y;
  for (double x : {0.0, 0.2, 0.45, 0.7, 1.0}) {
    X.push_back(Eigen::VectorXd::Constant(1, x));
    y.push_back(std::cos(5.0 * x));
  }
  GaussianProcess gp(s.lower, s.upper);
  GpHyperparameters h;
  h.r = Eigen::VectorXd::Constant(1, 0.3);
  h.noise = 1e-3;
  gp.condition(X, y, h);
  const auto pm = gp.predict(X[3]);
  std::mt19937_64 rng(77);
  const long n = 200000;
  auto ps = rejection_sample_prior(gp, s, pm.mean, pm.variance, n, rng);
  CHECK(ps.drawn == n);
  for (std::size_t i = 1; i < ps.accepted.size(); ++i) CHECK(ps.accepted[i - 1].density >= ps.accepted[i].density);

  const int bins = 20, fine = 200;
  std::vector<int> obs(bins, 0);
  for (const auto& a : ps.accepted) ++obs[std::min(bins - 1, static_cast<int>(a.theta[0] * bins))];
  for (int b = 0; b < bins; ++b) {
    double expect = 0.0;
    for (int k = 0; k < fine; ++k) {
      const double x = (b + (k + 0.5) / fine) / bins;
      const auto p = gp.predict(Eigen::VectorXd::Constant(1, x));
      expect += std::min(abc_prior_density(p.mean, p.variance, pm.mean, pm.variance) / ps.p_max, 1.0);
    }
    expect *= static_cast<double>(n) / (bins * fine);
    CHECK(std::abs(obs[b] - expect) < 5.0 * std::sqrt(expect) + 0.01 * expect + 2.0);
  }
}

TEST_CASE("Silverman bandwidth and KDE normalization") {
  std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  // sd = sqrt(55/6), IQR = 4.5 with linear interpolation.
  const double a = std::min(std::sqrt(55.0 / 6.0), 4.5 / 1.34);
  CHECK(silverman_bandwidth(x) == doctest::Approx(0.9 * a * std::pow(10.0, -0.2)).epsilon(1e-14));
  std::vector<double> same(7, 2.0);
  CHECK(silverman_bandwidth(same) == doctest::Approx(2e-6));
  auto kde = GaussianKde::fit(x);
  double integral = 0.0;
  for (double t = -40.0; t <= 50.0; t += 0.01) integral += kde(t) * 0.01;
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(GaussianKde::fit(std::vector<double>{}), InputError);
}

TEST_CASE("total variation between kernel density estimates") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n0(0.0, 1.0), n1(1.0, 1.0), n9(9.0, 1.0);
  std::vector<double> a(2000), b(2000), c(2000);
  for (auto& v : a) v = n0(rng);
  for (auto& v : b) v = n1(rng);
  for (auto& v : c) v = n9(rng);
  CHECK(std::abs(tv_distance(a, b) - (2.0 * normal_cdf(0.5) - 1.0)) < 0.05);
  CHECK(tv_distance(a, a) < 0.05);
  CHECK(tv_distance(a, c) > 0.95);
  CHECK(tv_distance(a, b) == doctest::Approx(tv_distance(b, a)).epsilon(1e-12));
}

TEST_CASE("records round trip, including failures and torn files") {
  std::vector<EvaluationRecord> recs(3);
  for (int i = 0; i < 3; ++i) {
    recs[i].theta = Eigen::VectorXd::LinSpaced(kNumParams, 0.1 * i, 1.0 + i) / 3.0;
    recs[i].y = 0.1 / (i + 1);
    recs[i].shift = i - 1.0;
    recs[i].provenance = static_cast<Provenance>(i);
    recs[i].beat_errors = {recs[i].y, recs[i].y * 1.5};
  }
  recs[1].failed = true;
  recs[1].y = kInf;
  auto dir = fresh_dir("purkinje_test_records");
  fs::create_directories(dir);
  save_records(recs, dir);
  auto back = load_records(dir);
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].theta == recs[i].theta);
    CHECK(back[i].y == recs[i].y);
    CHECK(back[i].shift == recs[i].shift);
    CHECK(back[i].provenance == recs[i].provenance);
    CHECK(back[i].failed == recs[i].failed);
    CHECK(back[i].beat_errors == recs[i].beat_errors);
  }
  // Drop the last error row: its record is no longer reusable.
  std::ifstream in(dir / "beat_errors.csv");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  all = all.substr(0, all.rfind('\n', all.size() - 2) + 1);
  std::ofstream(dir / "beat_errors.csv") << all;
  CHECK(load_records(dir).size() == 2);
  CHECK(provenance_from_string("BO") == Provenance::BO);
  CHECK_THROWS_AS(provenance_from_string("MCMC"), InputError);
}

TEST_CASE("run budget validation") {
  RunBudget b;
  CHECK_NOTHROW(b.validate());
  b.accept_threshold = 1.5;
  CHECK_THROWS_AS(b.validate(), InputError);
  b = RunBudget{};
  b.n_init = 1;
  CHECK_THROWS_AS(b.validate(), InputError);
}

TEST_CASE("identification on a two-parameter toy problem") {
  Toy toy;
  ForwardFn fwd = [&](const Eigen::VectorXd& t) { return toy(t); };
  auto budget = small_budget();
  auto res = run_identification(toy.space, fwd, budget, 5);
  CHECK(res.status == RunStatus::Complete);
  REQUIRE(res.ensemble.size() == 8);
  CHECK(res.records[res.best].y < 0.01);
  int lhs = 0, bo = 0, abc = 0;
  for (const auto& r : res.records) (r.provenance == Provenance::LHS ? lhs : r.provenance == Provenance::BO ? bo : abc)++;
  CHECK(lhs == 20);
  CHECK(bo == 10);
  CHECK(abc == static_cast<int>(res.records.size()) - 30);
  for (const auto& m : res.ensemble) {
    CHECK(m.tv < 0.9);
    CHECK(m.tv == doctest::Approx(tv_distance(res.records[m.record].beat_errors, res.records[res.best].beat_errors)));
    CHECK(res.records[m.record].provenance == Provenance::ABC);
    CHECK(toy.space.contains(m.theta));
  }
  // Same seed, same answer, regardless of concurrency.
  RunOptions par;
  par.jobs = 3;
  auto again = run_identification(toy.space, fwd, budget, 5, par);
  REQUIRE(again.records.size() == res.records.size());
  for (std::size_t i = 0; i < res.records.size(); ++i) {
    CHECK(again.records[i].theta == res.records[i].theta);
    CHECK(again.records[i].y == res.records[i].y);
  }
  auto other = run_identification(toy.space, fwd, budget, 6);
  CHECK(other.records[0].theta != res.records[0].theta);
}

TEST_CASE("threshold 1 accepts the first candidates in prior order") {
  Toy toy;
  toy.spread = 5.0;  // every error sample overlaps every other
  ForwardFn fwd = [&](const Eigen::VectorXd& t) { return toy(t); };
  auto budget = small_budget();
  budget.accept_threshold = 1.0;
  auto res = run_identification(toy.space, fwd, budget, 11);
  CHECK(res.status == RunStatus::Complete);
  CHECK(res.ensemble.size() == 8);
  CHECK(res.records.size() == 38);
  for (std::size_t i = 0; i < res.ensemble.size(); ++i) CHECK(res.ensemble[i].record == static_cast<int>(30 + i));
  for (std::size_t i = 1; i < res.ensemble.size(); ++i)
    CHECK(res.ensemble[i - 1].prior_density >= res.ensemble[i].prior_density);
}

TEST_CASE("posterior budget exhaustion, failed evaluations and resume") {
  Toy toy;
  std::atomic<int> calls{0};
  ForwardFn fwd = [&](const Eigen::VectorXd& t) {
    ++calls;
    if (t[0] > 95.0) throw NumericError("solver did not converge");
    return toy(t);
  };
  auto budget = small_budget();
  budget.accept_threshold = 1e-9;
  budget.max_abc_evals = 30;
  budget.retrain_after = 12;
  auto dir = fresh_dir("purkinje_test_run");
  RunOptions opt;
  opt.out_dir = dir;
  auto res = run_identification(toy.space, fwd, budget, 3, opt);
  CHECK(res.status == RunStatus::BudgetExhausted);
  CHECK(res.ensemble.empty());
  CHECK(res.records.size() == 60);
  CHECK(res.gp_refits == 3);
  for (const auto& r : res.records) {
    CHECK(r.failed == (r.theta[0] > 95.0));
    if (r.failed) CHECK(std::isinf(r.y));
  }
  CHECK(fs::exists(dir / "status.json"));
  CHECK(fs::exists(dir / "gp_model.json"));
  CHECK(fs::exists(dir / "ensemble" / "ensemble.json"));
  auto disk = load_records(dir);
  REQUIRE(disk.size() == 60);

  // Resume from a truncated history: cached records are replayed, the rest recomputed.
  disk.resize(41);
  save_records(disk, dir);
  RunOptions resume;
  resume.out_dir = dir;
  resume.cached = load_records(dir);
  const int before = calls;
  auto again = run_identification(toy.space, fwd, budget, 3, resume);
  CHECK(calls - before == 19);
  REQUIRE(again.records.size() == res.records.size());
  for (std::size_t i = 0; i < res.records.size(); ++i) {
    CHECK(again.records[i].theta == res.records[i].theta);
    CHECK(again.records[i].beat_errors == res.records[i].beat_errors);
  }
  auto reread = load_records(dir);
  REQUIRE(reread.size() == 60);
  CHECK(reread.back().theta == res.records.back().theta);
}
