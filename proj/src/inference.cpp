#include "purkinje/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "purkinje/random.hpp"

namespace purkinje {

const std::array<const char*, kNumParams> kParamNames{
    "l_i_L",      "l_i_R",      "l_F1_L",     "l_F2_L", "l_F1_R", "l_F2_R",
    "alpha_F1_L", "alpha_F2_L", "alpha_F1_R", "alpha_F2_R", "RT",  "CV"};

ParamSpace ParamSpace::defaults() {
  ParamSpace s;
  s.lower.resize(kNumParams);
  s.upper.resize(kNumParams);
  s.lower << 30, 30, 2, 2, 2, 2, -kPi / 4, -kPi / 4, -kPi / 4, -kPi / 4, -75, 2;
  s.upper << 100, 100, 50, 50, 50, 50, 3 * kPi / 4, 3 * kPi / 4, 3 * kPi / 4, 3 * kPi / 4, 50, 4;
  return s;
}

void ParamSpace::validate() const {
  if (lower.size() != upper.size() || lower.size() == 0) throw InputError("parameter bounds must be non-empty and matching");
  for (Eigen::Index i = 0; i < lower.size(); ++i)
    if (!(upper[i] > lower[i])) throw InputError("parameter bounds must be non-empty intervals");
}

bool ParamSpace::contains(const Eigen::VectorXd& theta) const {
  return theta.size() == lower.size() && (theta.array() >= lower.array()).all() && (theta.array() <= upper.array()).all();
}

std::vector<Eigen::VectorXd> latin_hypercube(int n, const ParamSpace& space, std::mt19937_64& rng) {
  if (n < 1) throw InputError("Latin hypercube needs n >= 1");
  space.validate();
  const int d = space.dim();
  std::vector<Eigen::VectorXd> pts(n, Eigen::VectorXd(d));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> perm(n);
  for (int k = 0; k < d; ++k) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const double w = space.upper[k] - space.lower[k];
    for (int i = 0; i < n; ++i) pts[i][k] = space.lower[k] + w * (perm[i] + u(rng)) / n;
  }
  return pts;
}

double expected_improvement(double mu, double var, double y_best) {
  const double sigma = std::sqrt(std::max(var, 0.0));
  const double gain = y_best - mu;
  if (!(sigma > 0.0)) return std::max(gain, 0.0);
  const double z = gain / sigma;
  const double Phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
  const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi);
  return std::max(gain * Phi + sigma * phi, 0.0);
}

Eigen::VectorXd maximize_expected_improvement(const GaussianProcess& gp, const ParamSpace& space, double y_best,
                                              const AcquisitionOptions& opt, std::mt19937_64& rng) {
  const int d = space.dim();
  const Eigen::VectorXd width = space.upper - space.lower;
  const int m = std::max(1, opt.candidates);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd U(d, m);
  for (int j = 0; j < m; ++j)
    for (int k = 0; k < d; ++k) U(k, j) = u(rng);
  Eigen::MatrixXd X = (U.array().colwise() * width.array()).colwise() + space.lower.array();
  Eigen::VectorXd mean, var;
  gp.predict_batch(X, mean, var);
  std::vector<double> ei(m);
  for (int j = 0; j < m; ++j) ei[j] = expected_improvement(mean[j], var[j], y_best);
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  const int top = std::clamp(opt.polish, 0, m);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return ei[a] > ei[b]; });

  auto eval = [&](const Eigen::VectorXd& uu) {
    auto p = gp.predict((space.lower.array() + uu.array() * width.array()).matrix());
    return expected_improvement(p.mean, p.variance, y_best);
  };
  Eigen::VectorXd best_u = U.col(order[0]);
  double best = ei[order[0]];
  for (int c = 0; c < top; ++c) {
    Eigen::VectorXd x = U.col(order[c]);
    double fx = ei[order[c]];
    double step = 0.05;
    int evals = 0;
    while (step >= 1e-3 && evals < 400) {
      bool improved = false;
      for (int k = 0; k < d; ++k)
        for (double sgn : {1.0, -1.0}) {
          Eigen::VectorXd y = x;
          y[k] = std::clamp(y[k] + sgn * step, 0.0, 1.0);
          if (y[k] == x[k]) continue;
          const double fy = eval(y);
          ++evals;
          if (fy > fx) x = y, fx = fy, improved = true;
        }
      if (!improved) step *= 0.5;
    }
    if (fx > best) best = fx, best_u = x;
  }
  return (space.lower.array() + best_u.array() * width.array()).matrix();
}

double abc_prior_density(double mu, double var, double y_min, double var_min) {
  const double s2 = std::max(var + var_min, 1e-300);
  const double z = mu - y_min;
  return std::exp(-0.5 * z * z / s2) / std::sqrt(2.0 * kPi * s2);
}

PriorSampling rejection_sample_prior(const GaussianProcess& gp, const ParamSpace& space, double y_min,
                                     double var_min, long n, std::mt19937_64& rng) {
  if (n < 1) throw InputError("prior sampling needs at least one draw");
  const int d = space.dim();
  const Eigen::VectorXd width = space.upper - space.lower;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd X(d, n);
  for (long j = 0; j < n; ++j)
    for (int k = 0; k < d; ++k) X(k, j) = space.lower[k] + width[k] * u(rng);
  Eigen::VectorXd mean(n), var(n);
  constexpr long kChunk = 4096;
  for (long j0 = 0; j0 < n; j0 += kChunk) {
    const long len = std::min(kChunk, n - j0);
    Eigen::VectorXd m, v;
    gp.predict_batch(X.middleCols(j0, len), m, v);
    mean.segment(j0, len) = m;
    var.segment(j0, len) = v;
  }
  PriorSampling out;
  out.drawn = n;
  out.min_variance = var.minCoeff();
  out.p_max = abc_prior_density(y_min, out.min_variance, y_min, var_min);
  std::uniform_real_distribution<double> r(0.0, out.p_max);
  for (long j = 0; j < n; ++j) {
    const double p = abc_prior_density(mean[j], var[j], y_min, var_min);
    if (p > r(rng)) out.accepted.push_back({X.col(j), p});
  }
  if (out.accepted.empty()) {
    std::ostringstream msg;
    msg << "prior rejection sampling accepted none of " << n << " draws (p_max " << out.p_max << ", min variance "
        << out.min_variance << ", y_min " << y_min << ")";
    throw NumericError(msg.str());
  }
  std::stable_sort(out.accepted.begin(), out.accepted.end(),
                   [](const PriorSample& a, const PriorSample& b) { return a.density > b.density; });
  return out;
}

// --- KDE / TV ------------------------------------------------------------------

namespace {

double quantile(std::vector<double> s, double q) {
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const std::size_t i = static_cast<std::size_t>(std::floor(pos));
  const double f = pos - static_cast<double>(i);
  return i + 1 < s.size() ? s[i] * (1 - f) + s[i + 1] * f : s[i];
}

double bandwidth_floor(std::span<const double> x) {
  double scale = 0.0;
  for (double v : x) scale = std::max(scale, std::abs(v));
  return 1e-6 * (scale > 0.0 ? scale : 1.0);
}

// Samples sorted ascending; terms beyond 9 bandwidths (below 3e-18 each) are skipped.
double kde_density(std::span<const double> samples, double h, double x) {
  constexpr double kReach = 9.0;
  auto first = std::lower_bound(samples.begin(), samples.end(), x - kReach * h);
  auto last = std::upper_bound(first, samples.end(), x + kReach * h);
  double s = 0.0;
  for (auto it = first; it != last; ++it) {
    const double z = (x - *it) / h;
    s += std::exp(-0.5 * z * z);
  }
  return s / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * kPi));
}

}  // namespace

double silverman_bandwidth(std::span<const double> samples) {
  const std::size_t n = samples.size();
  if (n == 0) throw InputError("bandwidth of an empty sample set");
  const double floor = bandwidth_floor(samples);
  if (n == 1) return floor;
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::vector<double> s(samples.begin(), samples.end());
  const double iqr = quantile(s, 0.75) - quantile(s, 0.25);
  double a = std::min(sd, iqr / 1.34);
  if (!(a > 0.0)) a = sd;
  const double h = 0.9 * a * std::pow(static_cast<double>(n), -0.2);
  return std::max(h, floor);
}

GaussianKde GaussianKde::fit(std::span<const double> samples) {
  if (samples.empty()) throw InputError("KDE needs at least one sample");
  GaussianKde kde;
  kde.samples.assign(samples.begin(), samples.end());
  std::sort(kde.samples.begin(), kde.samples.end());
  const double h0 = silverman_bandwidth(samples);
  const double floor = bandwidth_floor(samples);
  const std::size_t n = samples.size();
  if (n < 2) {
    kde.bandwidth = h0;
    return kde;
  }
  const std::size_t folds = std::min<std::size_t>(5, n);
  double best_score = -kInf;
  double best_h = h0;
  std::vector<double> train, test;
  for (int k = 0; k < 20; ++k) {
    const double h = std::max(h0 * std::pow(10.0, -2.0 + 3.0 * k / 19.0), floor);
    double score = 0.0;
    for (std::size_t f = 0; f < folds; ++f) {
      train.clear();
      test.clear();
      for (std::size_t i = 0; i < n; ++i) (i % folds == f ? test : train).push_back(samples[i]);
      std::sort(train.begin(), train.end());
      for (double x : test) score += std::log(std::max(kde_density(train, h, x), 1e-300));
    }
    if (score > best_score) best_score = score, best_h = h;
  }
  kde.bandwidth = best_h;
  return kde;
}

double GaussianKde::operator()(double x) const { return kde_density(samples, bandwidth, x); }

double tv_distance(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InputError("TV distance needs non-empty sample sets");
  const GaussianKde ka = GaussianKde::fit(a), kb = GaussianKde::fit(b);
  double lo = kInf, hi = -kInf;
  for (double v : a) lo = std::min(lo, v - 4 * ka.bandwidth), hi = std::max(hi, v + 4 * ka.bandwidth);
  for (double v : b) lo = std::min(lo, v - 4 * kb.bandwidth), hi = std::max(hi, v + 4 * kb.bandwidth);
  double max_x = -kInf;
  for (double v : a) max_x = std::max(max_x, v);
  for (double v : b) max_x = std::max(max_x, v);
  const double x0 = std::min(0.0, lo), x1 = std::max(1.5 * max_x, hi);
  constexpr int kPoints = 2048;
  const double dx = (x1 - x0) / (kPoints - 1);
  double integral = 0.0;
  for (int i = 0; i < kPoints; ++i) {
    const double x = x0 + i * dx;
    const double g = std::abs(ka(x) - kb(x));
    integral += (i == 0 || i == kPoints - 1) ? 0.5 * g : g;
  }
  return std::clamp(0.5 * integral * dx, 0.0, 1.0);
}

// --- records -------------------------------------------------------------------

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::LHS: return "LHS";
    case Provenance::BO: return "BO";
    case Provenance::ABC: return "ABC";
  }
  return "?";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "LHS") return Provenance::LHS;
  if (s == "BO") return Provenance::BO;
  if (s == "ABC") return Provenance::ABC;
  throw InputError("unknown provenance '" + s + "'");
}

namespace {

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "inf") return kInf;
  if (s == "-inf") return -kInf;
  std::size_t used = 0;
  double v = std::stod(s, &used);
  if (used != s.size()) throw InputError("bad number '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

void write_record_row(std::ostream& out, const EvaluationRecord& r) {
  for (Eigen::Index k = 0; k < r.theta.size(); ++k) out << format_double(r.theta[k]) << ',';
  out << format_double(r.y) << ',' << format_double(r.shift) << ',' << to_string(r.provenance) << ','
      << (r.failed ? 1 : 0) << '\n';
}

void write_errors_row(std::ostream& out, std::size_t index, const EvaluationRecord& r) {
  out << index;
  for (double q : r.beat_errors) out << ',' << format_double(q);
  out << '\n';
}

void write_headers(std::ostream& rec, std::ostream& err) {
  for (auto n : kParamNames) rec << n << ',';
  rec << "y,shift,provenance,failed\n";
  err << "record,q...\n";
}

}  // namespace

void save_records(std::span<const EvaluationRecord> records, const std::filesystem::path& dir) {
  std::ofstream rec(dir / "records.csv"), err(dir / "beat_errors.csv");
  if (!rec || !err) throw InputError("cannot write records in " + dir.string());
  write_headers(rec, err);
  for (std::size_t i = 0; i < records.size(); ++i) {
    write_record_row(rec, records[i]);
    write_errors_row(err, i, records[i]);
  }
}

std::vector<EvaluationRecord> load_records(const std::filesystem::path& dir) {
  std::ifstream rec(dir / "records.csv");
  if (!rec) throw InputError("cannot open " + (dir / "records.csv").string());
  std::vector<EvaluationRecord> out;
  std::string line;
  std::getline(rec, line);
  while (std::getline(rec, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != kNumParams + 4) break;  // torn last line of an interrupted run
    EvaluationRecord r;
    r.theta.resize(kNumParams);
    try {
      for (int k = 0; k < kNumParams; ++k) r.theta[k] = parse_double(cells[k]);
      r.y = parse_double(cells[kNumParams]);
      r.shift = parse_double(cells[kNumParams + 1]);
      r.provenance = provenance_from_string(cells[kNumParams + 2]);
      r.failed = cells[kNumParams + 3] == "1";
    } catch (const std::exception&) {
      break;
    }
    out.push_back(std::move(r));
  }
  std::ifstream err(dir / "beat_errors.csv");
  std::size_t matched = 0;
  if (err) {
    std::getline(err, line);
    while (std::getline(err, line) && matched < out.size()) {
      auto cells = split(line);
      if (cells.empty() || cells[0] != std::to_string(matched)) break;
      try {
        for (std::size_t k = 1; k < cells.size(); ++k) out[matched].beat_errors.push_back(parse_double(cells[k]));
      } catch (const std::exception&) {
        out[matched].beat_errors.clear();
        break;
      }
      ++matched;
    }
  }
  out.resize(matched);  // a record is only reusable together with its error sample
  return out;
}

// --- orchestration -------------------------------------------------------------

void RunBudget::validate() const {
  if (n_init < 2 || n_bo < 0 || n_prior_samples < 1 || n_posterior < 1 || retrain_after < 1 || max_abc_evals < 1 ||
      gp_restarts < 1)
    throw InputError("run budget counts must be positive (n_init >= 2)");
  if (!(accept_threshold > 0.0 && accept_threshold <= 1.0)) throw InputError("accept_threshold must lie in (0, 1]");
}

namespace {

class Run {
 public:
  Run(const ParamSpace& space, const ForwardFn& forward, const RunBudget& budget, std::uint64_t seed,
      const RunOptions& opt)
      : space_(space), forward_(forward), budget_(budget), seed_(seed), opt_(opt), cached_(opt.cached) {
    if (opt_.out_dir) {
      std::filesystem::create_directories(*opt_.out_dir);
      rows_on_disk_ = cached_.size();
      if (cached_.empty()) rewrite_files();
    }
  }

  IdentificationResult execute() {
    IdentificationResult res;
    status("lhs");
    auto rng = substream(seed_, "lhs");
    auto lhs = latin_hypercube(budget_.n_init, space_, rng);
    for (std::size_t i = 0; i < lhs.size(); i += std::max(1, opt_.jobs)) {
      std::vector<Eigen::VectorXd> batch(lhs.begin() + i, lhs.begin() + std::min(lhs.size(), i + std::max(1, opt_.jobs)));
      auto out = compute(batch, Provenance::LHS);
      for (std::size_t k = 0; k < batch.size(); ++k) commit(batch[k], out[k], Provenance::LHS);
    }
    log("LHS done: " + std::to_string(records_.size()) + " records, y_min " + format_double(best_y()));

    status("bo");
    for (int s = 0; s < budget_.n_bo; ++s) {
      Eigen::VectorXd theta;
      auto gp = fit_gp("gp/bo/" + std::to_string(s));
      auto brng = substream(seed_, "bo/" + std::to_string(s));
      if (gp) {
        theta = maximize_expected_improvement(*gp, space_, best_y(), budget_.acquisition, brng);
      } else {
        theta = latin_hypercube(1, space_, brng)[0];
      }
      auto out = compute({theta}, Provenance::BO);
      commit(theta, out[0], Provenance::BO);
    }
    res.best = best_index();
    if (res.best < 0) throw NumericError("every forward evaluation failed; no optimum to sample around");
    log("optimization done: y_min " + format_double(records_[res.best].y) + " at record " + std::to_string(res.best));

    status("abc", res.best);
    const EvaluationRecord best_rec = records_[res.best];
    const std::vector<double> q_min = best_rec.beat_errors;
    int abc_evals = 0;
    int round = 0;
    bool done = false;
    std::optional<GpHyperparameters> last_hyper;
    while (!done) {
      if (abc_evals >= budget_.max_abc_evals) {
        res.status = RunStatus::BudgetExhausted;
        break;
      }
      // Refits after the first start from the previous optimum plus one random restart.
      auto gp = last_hyper ? fit_gp("gp/abc/" + std::to_string(round), &*last_hyper, std::min(2, budget_.gp_restarts))
                           : fit_gp("gp/abc/" + std::to_string(round));
      if (!gp) throw NumericError("GP refit failed during posterior sampling");
      ++res.gp_refits;
      if (opt_.out_dir) gp->save(*opt_.out_dir / "gp_model.json");
      res.gp = *gp;
      last_hyper = gp->hyper();
      const auto pm = gp->predict(best_rec.theta);
      auto prng = substream(seed_, "prior/" + std::to_string(round));
      auto prior = rejection_sample_prior(*gp, space_, pm.mean, pm.variance, budget_.n_prior_samples, prng);
      log("ABC round " + std::to_string(round) + ": " + std::to_string(prior.accepted.size()) + " prior samples, p_max " +
          format_double(prior.p_max));
      int rejected_in_row = 0;
      const int jobs = std::max(1, opt_.jobs);
      for (std::size_t i = 0; i < prior.accepted.size() && !done && rejected_in_row < budget_.retrain_after;) {
        if (abc_evals >= budget_.max_abc_evals) {
          res.status = RunStatus::BudgetExhausted;
          done = true;
          break;
        }
        const std::size_t room = static_cast<std::size_t>(std::min(jobs, budget_.max_abc_evals - abc_evals));
        std::vector<Eigen::VectorXd> batch;
        for (std::size_t k = i; k < prior.accepted.size() && batch.size() < room; ++k)
          batch.push_back(prior.accepted[k].theta);
        auto out = compute(batch, Provenance::ABC);
        for (std::size_t k = 0; k < batch.size(); ++k, ++i) {
          ++abc_evals;
          const int index = commit(batch[k], out[k], Provenance::ABC);
          const auto& rec = records_[index];
          double tv = 1.0;
          if (!rec.failed && !rec.beat_errors.empty()) tv = tv_distance(rec.beat_errors, q_min);
          if (tv < budget_.accept_threshold) {
            EnsembleMember m;
            m.record = index;
            m.theta = batch[k];
            m.prior_density = prior.accepted[i].density;
            m.tv = tv;
            m.result = out[k].ecg.size() > 0 ? std::move(out[k]) : forward_(batch[k]);
            res.ensemble.push_back(std::move(m));
            rejected_in_row = 0;
            log("accepted record " + std::to_string(index) + " (TV " + format_double(tv) + "), " +
                std::to_string(res.ensemble.size()) + "/" + std::to_string(budget_.n_posterior));
            if (static_cast<int>(res.ensemble.size()) >= budget_.n_posterior) {
              done = true;
              break;
            }
          } else if (++rejected_in_row >= budget_.retrain_after) {
            ++i;
            break;
          }
        }
      }
      ++round;
    }
    res.records = records_;
    if (opt_.out_dir) write_outputs(res);
    status(res.status == RunStatus::Complete ? "complete" : "budget_exhausted", res.best,
           static_cast<int>(res.ensemble.size()));
    return res;
  }

 private:
  void log(const std::string& msg) const {
    if (opt_.log) opt_.log(msg);
  }

  int best_index() const {
    int best = -1;
    for (std::size_t i = 0; i < records_.size(); ++i)
      if (!records_[i].failed && std::isfinite(records_[i].y) && (best < 0 || records_[i].y < records_[best].y))
        best = static_cast<int>(i);
    return best;
  }
  double best_y() const {
    int b = best_index();
    return b < 0 ? kInf : records_[b].y;
  }

  std::optional<GaussianProcess> fit_gp(const std::string& stream, const GpHyperparameters* warm = nullptr,
                                        int restarts = -1) const {
    std::vector<Eigen::VectorXd> X;
    std::vector<double> y;
    for (const auto& r : records_)
      if (!r.failed && std::isfinite(r.y)) X.push_back(r.theta), y.push_back(r.y);
    if (X.size() < 2) return std::nullopt;
    GaussianProcess gp(space_.lower, space_.upper);
    auto rng = substream(seed_, stream);
    gp.fit(X, y, restarts < 0 ? budget_.gp_restarts : restarts, rng, warm);
    return gp;
  }

  // Forward results for a batch, reusing cached records when the replayed theta matches exactly.
  std::vector<ForwardResult> compute(const std::vector<Eigen::VectorXd>& batch, Provenance prov) {
    std::vector<ForwardResult> out(batch.size());
    std::vector<std::size_t> todo;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const std::size_t pos = records_.size() + k;
      if (pos < cached_.size() && cached_[pos].provenance == prov && cached_[pos].theta == batch[k]) {
        const auto& c = cached_[pos];
        out[k].loss = c.failed ? kInf : c.y;
        out[k].shift = c.shift;
        out[k].beat_errors = c.beat_errors;
        out[k].converged = !c.failed;
      } else {
        if (pos < cached_.size()) cached_.resize(pos);
        todo.push_back(k);
      }
    }
    auto run_one = [&](std::size_t k) {
      try {
        out[k] = forward_(batch[k]);
      } catch (const Error& e) {
        out[k] = ForwardResult{};
        out[k].loss = kInf;
        out[k].converged = false;
        log(std::string("forward evaluation failed: ") + e.what());
      }
    };
    if (opt_.jobs <= 1 || todo.size() <= 1) {
      for (auto k : todo) run_one(k);
    } else {
      std::vector<std::thread> threads;
      for (auto k : todo) threads.emplace_back(run_one, k);
      for (auto& t : threads) t.join();
    }
    return out;
  }

  int commit(const Eigen::VectorXd& theta, const ForwardResult& r, Provenance prov) {
    EvaluationRecord rec;
    rec.theta = theta;
    rec.y = r.loss;
    rec.shift = r.shift;
    rec.provenance = prov;
    rec.beat_errors = r.beat_errors;
    rec.failed = !std::isfinite(r.loss);
    records_.push_back(std::move(rec));
    if (opt_.out_dir && records_.size() > rows_on_disk_) {
      if (records_.size() - 1 < rows_on_disk_ || rows_on_disk_ != records_.size() - 1) rewrite_files();
      else append_last();
    }
    return static_cast<int>(records_.size()) - 1;
  }

  void rewrite_files() {
    save_records(records_, *opt_.out_dir);
    rows_on_disk_ = records_.size();
  }

  void append_last() {
    std::ofstream rec(*opt_.out_dir / "records.csv", std::ios::app), err(*opt_.out_dir / "beat_errors.csv", std::ios::app);
    write_record_row(rec, records_.back());
    write_errors_row(err, records_.size() - 1, records_.back());
    rows_on_disk_ = records_.size();
  }

  void status(const std::string& state, int best = -1, int accepted = 0) const {
    if (!opt_.out_dir) return;
    nlohmann::json j;
    j["state"] = state;
    j["seed"] = seed_;
    j["records"] = records_.size();
    j["accepted"] = accepted;
    if (best >= 0) {
      j["best_record"] = best;
      j["y_min"] = records_[best].y;
    }
    std::ofstream out(*opt_.out_dir / "status.json");
    out << j.dump(2) << '\n';
  }

  void write_outputs(const IdentificationResult& res) const {
    const auto dir = *opt_.out_dir / "ensemble";
    std::filesystem::create_directories(dir);
    nlohmann::json summary = nlohmann::json::array();
    for (std::size_t i = 0; i < res.ensemble.size(); ++i) {
      const auto& m = res.ensemble[i];
      char name[32];
      std::snprintf(name, sizeof name, "member_%03zu", i);
      const auto mdir = dir / name;
      std::filesystem::create_directories(mdir);
      save_tree(m.result.trees[0], mdir / "tree_left.json");
      save_tree(m.result.trees[1], mdir / "tree_right.json");
      save_ecg_csv(m.result.ecg, mdir / "ecg.csv");
      nlohmann::json j;
      j["record"] = m.record;
      j["theta"] = std::vector<double>(m.theta.data(), m.theta.data() + m.theta.size());
      j["loss"] = m.result.loss;
      j["shift"] = m.result.shift;
      j["tv"] = m.tv;
      j["prior_density"] = m.prior_density;
      j["beat_errors"] = m.result.beat_errors;
      j["max_activation"] = m.result.max_activation;
      std::ofstream(mdir / "member.json") << j.dump(2) << '\n';
      summary.push_back({{"member", name}, {"record", m.record}, {"tv", m.tv}, {"loss", m.result.loss}});
    }
    nlohmann::json all;
    all["parameters"] = kParamNames;
    all["best_record"] = res.best;
    all["members"] = summary;
    std::ofstream(dir / "ensemble.json") << all.dump(2) << '\n';
  }

  const ParamSpace& space_;
  const ForwardFn& forward_;
  const RunBudget& budget_;
  std::uint64_t seed_;
  const RunOptions& opt_;
  std::vector<EvaluationRecord> cached_;
  std::vector<EvaluationRecord> records_;
  std::size_t rows_on_disk_ = 0;
};

}  // namespace

IdentificationResult run_identification(const ParamSpace& space, const ForwardFn& forward, const RunBudget& budget,
                                        std::uint64_t seed, const RunOptions& options) {
  space.validate();
  budget.validate();
  return Run(space, forward, budget, seed, options).execute();
}

}  // namespace purkinje
