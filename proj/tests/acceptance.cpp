// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

#include <CLI11.hpp>
#include <gsl/gsl_cdf.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "purkinje/fixtures.hpp"
#include "purkinje/gp.hpp"
#include "purkinje/pipeline.hpp"

using namespace purkinje;
namespace fs = std::filesystem;

namespace {

int passed = 0, reported = 0;
std::vector<std::string> lines;

void say(const std::string& line) {
  lines.push_back(line);
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
}

void report(int id, bool pass, const std::string& detail) {
  ++reported;
  passed += pass ? 1 : 0;
  char head[32];
  std::snprintf(head, sizeof head, "criterion %2d: %s  ", id, pass ? "PASS" : "FAIL");
  say(head + detail);
}

// Verdicts are kept next to the work products since ctest hides the output of passing tests.
void write_report(const fs::path& work) {
  std::ofstream out(work / "report.txt");
  for (const auto& l : lines) out << l << '\n';
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- eikonal ----------------------------------------------------------------

constexpr double kCubeSide = 10.0;
// Cube diameter / 20, rounded to a whole number of cells per side.
const int kCubeCells = static_cast<int>(std::ceil(20.0 / std::sqrt(3.0)));

// L-infinity error against sqrt(d^T D^{-1} d) from a vertex source, and the largest exact time.
std::pair<double, double> cube_error(int cells, const Mat3& D, const Vec3& source) {
  auto vm = make_box_mesh(Vec3::Zero(), Vec3::Constant(kCubeSide), cells, cells, cells);
  int src = 0;
  for (std::size_t v = 0; v < vm.num_vertices(); ++v)
    if ((vm.vertices()[v] - source).norm() < (vm.vertices()[src] - source).norm()) src = static_cast<int>(v);
  std::vector<Mat3> Ds(vm.num_tets(), D);
  std::vector<VertexSeed> seeds{{src, 0.0}};
  const auto tau = solve_myocardium(vm, Ds, seeds);
  const Mat3 Dinv = D.inverse();
  double err = 0.0, tmax = 0.0;
  for (std::size_t v = 0; v < vm.num_vertices(); ++v) {
    const Vec3 d = vm.vertices()[v] - vm.vertices()[src];
    const double t = std::sqrt(d.dot(Dinv * d));
    tmax = std::max(tmax, t);
    err = std::max(err, std::abs(tau[v] - t));
  }
  return {err, tmax};
}

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  const double v = 0.6;
  const Mat3 D = v * v * Mat3::Identity();
  const double corner = kCubeSide * std::sqrt(3.0) / v;
  const auto [e1, tm1] = cube_error(kCubeCells, D, Vec3::Zero());
  const auto [e2, tm2] = cube_error(2 * kCubeCells, D, Vec3::Zero());
  const double order = std::log2(e1 / e2);
  const double secs = seconds_since(t0);
  const bool pass = e1 < 0.05 * corner && e2 < e1 && order >= 0.8 && secs < 30.0;
  report(1, pass,
         fmt("isotropic %.0f mm cube, %d^3 cells, source ball %.1f mm: Linf %.3f ms = %.2f%% of corner time (< 5%%); refined %.3f ms, order %.2f (>= 0.8); "
             "%.1f s (< 30 s)",
             kCubeSide, kCubeCells, EikonalOptions{}.source_radius, e1, 100.0 * e1 / corner, e2, order, secs));
}

std::vector<Vec3> fiber_directions() {
  std::vector<Vec3> f{Vec3::UnitX(), Vec3(1, 1, 0).normalized(), Vec3(1, 1, 1).normalized(), Vec3(1, 2, 3).normalized(),
                      Vec3(3, -1, 2).normalized()};
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  while (f.size() < 20) f.push_back(Vec3(n(rng), n(rng), n(rng)).normalized());
  return f;
}

void criterion_2() {
  const double vf = 0.6, vt = 0.06;
  double worst = 0.0, worst_center = 0.0;
  Vec3 worst_fiber = Vec3::Zero();
  for (const Vec3& f : fiber_directions()) {
    const Mat3 D = vt * vt * Mat3::Identity() + (vf * vf - vt * vt) * f * f.transpose();
    const auto [e, tm] = cube_error(kCubeCells, D, Vec3::Zero());
    if (e / tm > worst) worst = e / tm, worst_fiber = f;
    const auto [ec, tmc] = cube_error(kCubeCells, D, Vec3::Constant(kCubeSide / 2));
    worst_center = std::max(worst_center, ec / tmc);
  }
  report(2, worst < 0.07,
         fmt("10:1 anisotropy, 20 fiber directions, corner source: worst Linf %.2f%% of max time (< 7%%) at fiber "
             "(%.2f, %.2f, %.2f); centred source worst %.2f%%",
             100.0 * worst, worst_fiber.x(), worst_fiber.y(), worst_fiber.z(), 100.0 * worst_center));
}

// --- tree -------------------------------------------------------------------

void criterion_3() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> len(0.1, 5.0), cvd(1.0, 4.0), td(0.0, 20.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 200;
    PurkinjeTree t;
    t.nodes.assign(n, Vec3::Zero());
    t.uv.assign(n, Vec2::Zero());
    for (int i = 1; i < n; ++i) {
      std::uniform_int_distribution<int> parent(0, i - 1);
      t.edges.push_back({parent(rng), i});
      t.edge_lengths.push_back(len(rng));
    }
    const double cv = cvd(rng);
    std::uniform_int_distribution<int> node(0, n - 1);
    std::vector<TreeSource> src{{node(rng), td(rng)}, {node(rng), td(rng)}};
    const auto tau = solve_tree(t, cv, src);
    // Bellman-Ford: relax every edge until nothing changes.
    std::vector<double> d(n, kInf);
    for (const auto& s : src) d[s.node] = std::min(d[s.node], s.time);
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t e = 0; e < t.edges.size(); ++e) {
        const int a = t.edges[e][0], b = t.edges[e][1];
        const double w = t.edge_lengths[e] / cv;
        if (d[a] + w < d[b]) d[b] = d[a] + w, changed = true;
        if (d[b] + w < d[a]) d[a] = d[b] + w, changed = true;
      }
    }
    for (int i = 0; i < n; ++i) worst = std::max(worst, std::abs(tau[i] - d[i]));
  }
  report(3, worst <= 1e-9, fmt("50 random 200-node trees: max |solve_tree - Bellman-Ford| = %.3g ms (<= 1e-9)", worst));
}

// --- coupled iteration and ECG -----------------------------------------------------

struct LeadCheck {
  double worst = 0.0;
  int traces = 0;
  void add(const EcgTrace& tr) {
    ++traces;
    const auto& L = tr.leads;
    for (std::size_t k = 0; k < tr.size(); ++k) {
      const double I = L[0][k], II = L[1][k], III = L[2][k], aVR = L[3][k], aVL = L[4][k], aVF = L[5][k];
      for (double r : {III - (II - I), aVR + 0.5 * (I + II), aVL - (I - 0.5 * II), aVF - (II - 0.5 * I), aVR + aVL + aVF})
        worst = std::max(worst, std::abs(r));
    }
  }
};

LeadCheck lead_check;

void criterion_4(const RunConfig& cfg, const ForwardModel& model) {
  const Eigen::VectorXd& theta = cfg.theta_true;
  const auto sim = model.simulate(theta);
  lead_check.add(sim.ecg);
  const auto& an = model.anatomy();
  MyocardiumSolver solver(an.myocardium, tensor_field(cfg.conductivity, an.myocardium), cfg.eikonal);
  CouplingConfig cc;
  cc.cv_purkinje = theta[11];
  cc.root_times = root_times_from_rt(theta[10]);
  cc.max_outer_iters = cfg.max_outer_iters;
  cc.tol = cfg.coupling_tol;

  std::optional<ActivationField> prev;
  double worst_rise = 0.0;
  auto rise = [&](const std::vector<double>& now, const std::vector<double>& before) {
    for (std::size_t i = 0; i < now.size(); ++i)
      if (std::isfinite(before[i])) worst_rise = std::max(worst_rise, now[i] - before[i]);
  };
  int observed = 0;
  auto af = solve_coupled({&sim.trees[0], &sim.trees[1]}, solver, cc, [&](int, const ActivationField& f) {
    ++observed;
    if (prev) {
      rise(f.tau_myo, prev->tau_myo);
      rise(f.tau_tree[0], prev->tau_tree[0]);
      rise(f.tau_tree[1], prev->tau_tree[1]);
    }
    prev = f;
  });

  const auto& left = sim.trees[0];
  std::vector<TreeSource> root{{left.root, cc.root_times[0]}};
  const auto ortho = solve_tree(left, cc.cv_purkinje, root);
  int antidromic = 0;
  double gain = 0.0;
  for (int p : left.pmjs)
    if (af.tau_tree[0][p] < ortho[p] - 1e-9) ++antidromic, gain = std::max(gain, ortho[p] - af.tau_tree[0][p]);
  const bool pass = af.converged && af.iterations <= 5 && worst_rise <= 1e-9 && antidromic > 0;
  report(4, pass,
         fmt("fixture, RT %.0f ms: converged %s in %d sweeps (<= 5); largest rise between sweeps %.2g ms over %d observed "
             "fields; %d of %zu left PMJs antidromic (earliest by %.1f ms)",
             theta[10], af.converged ? "yes" : "no", af.iterations, worst_rise, observed, antidromic, left.pmjs.size(), gain));
}

void criterion_5(const RunConfig& cfg, const ForwardModel& model) {
  const auto& an = model.anatomy();
  const auto lf = build_lead_fields(an.myocardium, an.electrodes);
  std::vector<double> tau(an.myocardium.num_vertices(), 30.0);
  const auto flat = compute_ecg(tau, an.myocardium, cfg.conductivity, lf, cfg.action_potential, cfg.dt, cfg.horizon);
  double vmax = 0.0;
  for (const auto& lead : flat.leads)
    for (double x : lead) vmax = std::max(vmax, std::abs(x));
  lead_check.add(flat);
  std::mt19937_64 rng(5);
  for (const auto& theta : latin_hypercube(4, cfg.bounds, rng)) lead_check.add(model.simulate(theta, false).ecg);
  report(5, vmax < 1e-12 && lead_check.worst <= 1e-9,
         fmt("uniform activation: max |V| = %.2g (< 1e-12); lead identities on %d traces: max residual %.2g (<= 1e-9)", vmax,
             lead_check.traces, lead_check.worst));
}

// --- GP and EI --------------------------------------------------------------

void criterion_6() {
  std::mt19937_64 rng(6);
  const ParamSpace space = ParamSpace::defaults();
  const int n = 80, d = space.dim();
  const auto X = latin_hypercube(n, space, rng);
  std::vector<double> y;
  for (const auto& x : X) {
    const Eigen::VectorXd z = ((x - space.lower).array() / (space.upper - space.lower).array()).matrix();
    y.push_back(std::sin(3.0 * z[0]) + z[10] * z[10] + 0.3 * z[11]);
  }
  GpHyperparameters h;
  h.eta = 1.2;
  h.r = Eigen::VectorXd::LinSpaced(d, 0.5, 3.0);
  h.noise = 1e-4;
  GaussianProcess gp(space.lower, space.upper);
  gp.condition(X, y, h);

  // Dense oracle: explicit inverse of the covariance of standardized targets.
  Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
  const double mean = yv.mean(), sd = std::sqrt((yv.array() - mean).square().mean());
  const Eigen::VectorXd ys = (yv.array() - mean) / sd;
  auto z = [&](const Eigen::VectorXd& x) {
    return Eigen::VectorXd((x - space.lower).array() / (space.upper - space.lower).array());
  };
  auto k = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return h.eta * h.eta * std::exp(-((z(a) - z(b)).array() / h.r.array()).matrix().norm());
  };
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) K(i, j) = k(X[i], X[j]) + (i == j ? h.noise + GaussianProcess::kJitter : 0.0);
  const Eigen::MatrixXd Kinv = K.fullPivLu().inverse();
  double gp_err = 0.0;
  auto test = latin_hypercube(50, space, rng);
  test.push_back(X[7]);
  for (const auto& x : test) {
    Eigen::VectorXd ks(n);
    for (int i = 0; i < n; ++i) ks[i] = k(X[i], x);
    const auto p = gp.predict(x);
    gp_err = std::max(gp_err, std::abs(p.mean - (mean + sd * ks.dot(Kinv * ys))));
    gp_err = std::max(gp_err, std::abs(p.variance - sd * sd * (h.eta * h.eta - ks.dot(Kinv * ks))));
  }

  // EI against a stratified 1e6-draw Monte Carlo estimate of E[max(y_best - Y, 0)].
  const int draws = 1000000;
  std::uniform_real_distribution<double> u(0.0, 1.0), um(-1.0, 1.0), us(0.05, 1.0);
  double ei_err = 0.0;
  for (int trial = 0; trial < 100;) {
    const double mu = um(rng), s = us(rng), best = um(rng);
    if (std::abs((best - mu) / s) > 3.0) continue;
    ++trial;
    double acc = 0.0;
    for (int i = 0; i < draws; ++i) {
      const double zi = gsl_cdf_ugaussian_Pinv((i + u(rng)) / draws);
      acc += std::max(best - (mu + s * zi), 0.0);
    }
    const double mc = acc / draws, ei = expected_improvement(mu, s * s, best);
    ei_err = std::max(ei_err, std::abs(ei - mc) / mc);
  }
  const double at_incumbent = expected_improvement(0.37, 0.0, 0.37);
  const double at_tiny = expected_improvement(0.37, 1e-40, 0.37);
  const bool pass = gp_err < 1e-10 && ei_err < 0.01 && at_incumbent < 1e-12 && at_tiny < 1e-12;
  report(6, pass,
         fmt("GP vs dense oracle (80 points, 12-D): max |diff| %.2g (< 1e-10); EI vs 1e6-draw MC on 100 triples: max rel "
             "%.3g%% (< 1%%); EI at a noiseless incumbent %.2g, at variance 1e-40 %.2g (< 1e-12)",
             gp_err, 100.0 * ei_err, at_incumbent, at_tiny));
}

// --- synthetic recovery, TV, pacing, determinism ------------------------------

double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct FitRun {
  fs::path dir;
  IdentificationResult result;
  RunStatus status = RunStatus::Complete;
  double seconds = 0.0;
};

Logger progress(const std::string& tag) {
  return [tag](const std::string& m) { std::cerr << "[" << tag << "] " << m << "\n"; };
}

void criterion_7(const RunConfig& cfg, const ForwardModel& model, const FitRun& run) {
  const auto& r = run.result;
  const double power = qrs_mean_power(model.reference().ecg);
  const double y_min = r.best >= 0 ? r.records[r.best].y : kInf;
  const bool a = y_min <= 0.05 * power;

  int below = 0;
  for (const auto& m : r.ensemble) below += m.tv < cfg.budget.accept_threshold ? 1 : 0;
  const bool b = static_cast<int>(r.ensemble.size()) == cfg.budget.n_posterior && below == cfg.budget.n_posterior;

  std::string iqr_text = "no ensemble";
  bool c = false;
  if (r.ensemble.size() >= 2) {
    auto rel_iqr = [&](int i) {
      std::vector<double> v;
      for (const auto& m : r.ensemble) v.push_back(m.theta[i]);
      return (quantile(v, 0.75) - quantile(v, 0.25)) / (cfg.bounds.upper[i] - cfg.bounds.lower[i]);
    };
    const double cv = rel_iqr(11), rt = rel_iqr(10);
    double left = 0.0;
    int left_at = 2;
    for (int i : {2, 3, 6, 7})
      if (rel_iqr(i) > left) left = rel_iqr(i), left_at = i;
    c = cv <= 0.4 && rt <= 0.4 && left >= 0.6;
    iqr_text = fmt("IQR/range CV %.2f, RT %.2f (<= 0.40), widest left fascicle %s %.2f (>= 0.60)", cv, rt,
                   kParamNames[left_at], left);
  }
  report(7, a && b && c,
         fmt("%zu evaluations, %.0f s: (a) y_min %.3g = %.1f%% of QRS mean power %.3g (<= 5%%) %s; (b) %zu/%d members, "
             "%d with TV < %.2f %s; (c) %s %s",
             r.records.size(), run.seconds, y_min, 100.0 * y_min / power, power, a ? "ok" : "not met", r.ensemble.size(),
             cfg.budget.n_posterior, below, cfg.budget.accept_threshold, b ? "ok" : "not met", iqr_text.c_str(),
             c ? "ok" : "not met"));
}

void criterion_8() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  const int m = 10000;
  std::vector<double> a(m), b(m), far(m);
  for (int i = 0; i < m; ++i) a[i] = n(rng), b[i] = 1.0 + n(rng), far[i] = 20.0 + n(rng);
  const double expected = 2.0 * gsl_cdf_ugaussian_P(0.5) - 1.0;
  const double shifted = tv_distance(a, b), same = tv_distance(a, a), apart = tv_distance(a, far);
  report(8, std::abs(shifted - expected) <= 0.05 && same < 0.05 && apart > 0.95,
         fmt("1e4-sample unit Gaussians: TV at mean distance 1 = %.4f (%.4f +- 0.05); identical %.4f (< 0.05); 20 apart "
             "%.4f (> 0.95); %.0f s",
             shifted, expected, same, apart, seconds_since(t0)));
}

void criterion_9(const FitRun& run) {
  if (run.result.ensemble.empty()) {
    report(9, false, "the recovery run produced no ensemble members to pace");
    return;
  }
  const auto pace = cmd_pace(run.dir, progress("pace"));
  int reduced = 0;
  for (const auto& m : pace.members) reduced += m.max_activation_paced < m.max_activation_fitted ? 1 : 0;
  std::vector<std::size_t> order(pace.members.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return pace.members[i].max_activation_paced < pace.members[j].max_activation_paced;
  });
  const std::array<std::size_t, 3> expected{order.front(), order[(order.size() - 1) / 2], order.back()};
  const bool pass = reduced == static_cast<int>(pace.members.size()) && pace.selection == expected &&
                    fs::exists(pace.out_dir / "summary.json");
  report(9, pass,
         fmt("%d/%zu members with RT = 0 activate faster than at their fitted RT; min/median/max selection %s", reduced,
             pace.members.size(), pace.selection == expected ? "consistent" : "inconsistent"));
}

void criterion_10(const RunConfig& base, const fs::path& work) {
  RunConfig cfg = base;
  cfg.budget.n_init = 12;
  cfg.budget.n_bo = 4;
  cfg.budget.n_prior_samples = 20000;
  cfg.budget.n_posterior = 4;
  cfg.budget.accept_threshold = 1.0;
  cfg.budget.gp_restarts = 2;
  cfg.budget.acquisition = {2000, 3};
  fs::remove_all(work / "determinism");
  fs::create_directories(work / "determinism");
  const auto a = cmd_fit(cfg, work / "determinism" / "run", progress("determinism"));
  const auto b = cmd_fit(cfg, work / "determinism" / "run", progress("determinism"));
  bool same = a.run_dir != b.run_dir && slurp(a.run_dir / "records.csv") == slurp(b.run_dir / "records.csv") &&
              slurp(a.run_dir / "beat_errors.csv") == slurp(b.run_dir / "beat_errors.csv");
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.run_dir / "ensemble")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), a.run_dir);
    same = same && fs::exists(b.run_dir / rel) && slurp(e.path()) == slurp(b.run_dir / rel);
  }
  report(10, same && !a.result.ensemble.empty(),
         fmt("two cmd_fit runs, same config and seed (%zu evaluations, %zu members): records.csv, beat_errors.csv and %d "
             "ensemble files %s",
             a.result.records.size(), a.result.ensemble.size(), files, same ? "bit-identical" : "differ"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  fs::path work = "acceptance";
  std::optional<fs::path> reuse;
  std::vector<int> only;
  bool strict = false;
  app.add_option("--work-dir", work, "Scratch directory for fit and pacing outputs");
  app.add_option("--reuse-fit", reuse, "Finished recovery run to evaluate instead of fitting again");
  app.add_option("--only", only, "Criteria to run (default: all)");
  app.add_flag("--strict", strict, "Exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int i) { return only.empty() || std::find(only.begin(), only.end(), i) != only.end(); };

  try {
    fs::create_directories(work);
    if (want(1)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();

    const RunConfig cfg;
    std::optional<ForwardModel> model;
    if (want(4) || want(5) || want(7) || want(9)) {
      model.emplace(cfg, load_anatomy(cfg));
      model->set_reference(build_reference(*model));
    }
    if (want(4)) criterion_4(cfg, *model);
    if (want(5)) criterion_5(cfg, *model);
    if (want(6)) criterion_6();

    if (want(7) || want(9)) {
      FitRun run;
      const auto t0 = std::chrono::steady_clock::now();
      if (reuse) {
        const auto stored = RunConfig::from_json(nlohmann::json::parse(slurp(*reuse / "run_config.json")), *reuse);
        auto strip = [](nlohmann::json j) {
          j.erase("jobs");
          return j;
        };
        if (strip(stored.to_json()) != strip(cfg.to_json()))
          throw InputError("--reuse-fit run was made with a different configuration");
        // Finished runs replay from their records without new evaluations.
        fs::path copy = work / "fit";
        fs::remove_all(copy);
        fs::copy(*reuse, copy, fs::copy_options::recursive);
        auto status = nlohmann::json::parse(slurp(copy / "status.json"));
        status["state"] = "running";
        std::ofstream(copy / "status.json") << status.dump(2);
        fs::remove_all(copy / "ensemble");
        auto fo = cmd_fit(stored, copy, progress("fit"));
        run = {fo.run_dir, std::move(fo.result), fo.status, 0.0};
      } else {
        fs::remove_all(work / "fit");
        auto fo = cmd_fit(cfg, work / "fit", progress("fit"));
        run = {fo.run_dir, std::move(fo.result), fo.status, 0.0};
      }
      run.seconds = seconds_since(t0);
      if (want(7)) criterion_7(cfg, *model, run);
      if (want(9)) criterion_9(run);
    }
    if (want(8)) criterion_8();
    if (want(10)) criterion_10(cfg, work);
  } catch (const std::exception& e) {
    say(std::string("acceptance aborted: ") + e.what());
    write_report(work);
    return 1;
  }
  say("acceptance: " + std::to_string(passed) + "/" + std::to_string(reported) + " criteria passed");
  write_report(work);
  return strict && passed != reported ? 1 : 0;
}
