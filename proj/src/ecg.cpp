#include "purkinje/ecg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace purkinje {

const std::array<const char*, kNumLeads> kLeadNames{"I",  "II", "III", "aVR", "aVL", "aVF",
                                                    "V1", "V2", "V3",  "V4",  "V5",  "V6"};
const std::array<const char*, kNumElectrodes> kElectrodeNames{"RA", "LA", "LL", "V1", "V2", "V3", "V4", "V5", "V6"};

namespace {

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// --- action potential --------------------------------------------------------

void ActionPotentialTemplate::validate() const {
  if (!(plateau > resting)) throw InputError("action potential plateau must exceed resting potential");
  if (!(upstroke_width > 0.0) || !(repol_width > 0.0) || !(apd > 0.0))
    throw InputError("action potential widths and duration must be positive");
}

double ActionPotentialTemplate::operator()(double xi) const {
  return resting + (plateau - resting) * logistic(xi / upstroke_width) * logistic(-(xi - apd) / repol_width);
}

double ActionPotentialTemplate::derivative(double xi) const {
  const double a = logistic(xi / upstroke_width), b = logistic(-(xi - apd) / repol_width);
  const double da = a * (1.0 - a) / upstroke_width, db = -b * (1.0 - b) / repol_width;
  return (plateau - resting) * (da * b + a * db);
}

// --- traces ------------------------------------------------------------------

double EcgTrace::max_abs() const {
  std::size_t a = 0, b = size();
  if (qrs_duration > 0.0) {
    a = static_cast<std::size_t>(std::clamp(std::ceil((qrs_onset - t0) / dt - 1e-9), 0.0, static_cast<double>(size())));
    b = static_cast<std::size_t>(
        std::clamp(std::floor((qrs_onset + qrs_duration - t0) / dt + 1e-9) + 1.0, 0.0, static_cast<double>(size())));
  }
  double m = 0.0;
  for (const auto& lead : leads)
    for (std::size_t k = a; k < b; ++k) m = std::max(m, std::abs(lead[k]));
  return m;
}

void EcgTrace::scale(double factor) {
  for (auto& lead : leads)
    for (double& v : lead) v *= factor;
}

void EcgTrace::validate() const {
  if (!(dt > 0.0)) throw InputError("ECG sampling step must be positive");
  for (const auto& lead : leads)
    if (lead.size() != leads[0].size()) throw InputError("all ECG leads must have the same length");
  for (const auto& lead : leads)
    for (double v : lead)
      if (!std::isfinite(v)) throw NumericError("non-finite ECG sample");
}

const std::array<std::array<double, kNumElectrodes>, kNumLeads>& lead_matrix() {
  static const auto m = [] {
    std::array<std::array<double, kNumElectrodes>, kNumLeads> a{};
    enum { RA, LA, LL };
    a[0][LA] = 1, a[0][RA] = -1;                        // I
    a[1][LL] = 1, a[1][RA] = -1;                        // II
    a[2][LL] = 1, a[2][LA] = -1;                        // III
    a[3][RA] = 1, a[3][LA] = -0.5, a[3][LL] = -0.5;     // aVR
    a[4][LA] = 1, a[4][RA] = -0.5, a[4][LL] = -0.5;     // aVL
    a[5][LL] = 1, a[5][RA] = -0.5, a[5][LA] = -0.5;     // aVF
    for (int i = 0; i < 6; ++i) {                       // V1..V6 against the Wilson terminal
      a[6 + i][3 + i] = 1.0;
      a[6 + i][RA] = a[6 + i][LA] = a[6 + i][LL] = -1.0 / 3.0;
    }
    return a;
  }();
  return m;
}

EcgTrace leads_from_electrodes(const std::array<std::vector<double>, kNumElectrodes>& phi, double dt, double t0) {
  EcgTrace tr;
  tr.dt = dt;
  tr.t0 = t0;
  const std::size_t n = phi[0].size();
  const auto& m = lead_matrix();
  for (int l = 0; l < kNumLeads; ++l) {
    tr.leads[l].assign(n, 0.0);
    for (int e = 0; e < kNumElectrodes; ++e)
      if (m[l][e] != 0.0)
        for (std::size_t k = 0; k < n; ++k) tr.leads[l][k] += m[l][e] * phi[e][k];
  }
  return tr;
}

void detect_qrs_window(EcgTrace& trace, double fraction) {
  const std::size_t n = trace.size();
  std::vector<double> env(n, 0.0);
  for (const auto& lead : trace.leads)
    for (std::size_t k = 0; k < n; ++k) env[k] += lead[k] * lead[k] / kNumLeads;
  double peak = 0.0;
  for (double& e : env) peak = std::max(peak, e = std::sqrt(e));
  if (!(peak > 0.0)) throw InputError("cannot detect a QRS window in a flat trace");
  std::size_t a = 0, b = n - 1;
  while (env[a] < fraction * peak) ++a;
  while (env[b] < fraction * peak) --b;
  trace.qrs_onset = trace.time(a);
  trace.qrs_duration = static_cast<double>(b - a) * trace.dt;
}

void save_ecg_csv(const EcgTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(17);
  out << "t_ms";
  for (auto name : kLeadNames) out << ',' << name;
  out << '\n';
  for (std::size_t k = 0; k < trace.size(); ++k) {
    out << trace.time(k);
    for (const auto& lead : trace.leads) out << ',' << lead[k];
    out << '\n';
  }
}

EcgTrace load_ecg_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError(path.string() + ": empty ECG file");
  {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    for (auto name : kLeadNames) {
      if (!std::getline(ss, cell, ',')) throw InputError(path.string() + ": missing lead column " + name);
      while (!cell.empty() && std::isspace(static_cast<unsigned char>(cell.back()))) cell.pop_back();
      if (cell != name) throw InputError(path.string() + ": expected lead column " + name + ", got " + cell);
    }
  }
  std::vector<double> t;
  EcgTrace tr;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw InputError(path.string() + ":" + std::to_string(row) + ": bad number '" + cell + "'");
      }
    }
    if (vals.size() != kNumLeads + 1) throw InputError(path.string() + ":" + std::to_string(row) + ": expected 13 columns");
    t.push_back(vals[0]);
    for (int l = 0; l < kNumLeads; ++l) tr.leads[l].push_back(vals[l + 1]);
  }
  if (t.size() < 2) throw InputError(path.string() + ": need at least two samples");
  tr.t0 = t[0];
  tr.dt = (t.back() - t.front()) / static_cast<double>(t.size() - 1);
  for (std::size_t k = 1; k < t.size(); ++k)
    if (std::abs(t[k] - t[k - 1] - tr.dt) > 1e-6 * tr.dt) throw InputError(path.string() + ": non-uniform sampling");
  tr.validate();
  detect_qrs_window(tr);
  return tr;
}

// --- lead fields -------------------------------------------------------------

std::vector<double> LeadFieldSet::lead_field(int lead) const {
  if (lead < 0 || lead >= kNumLeads) throw InputError("lead index out of range");
  const auto& row = lead_matrix()[lead];
  std::vector<double> z(phi[0].size(), 0.0);
  for (int e = 0; e < kNumElectrodes; ++e)
    if (row[e] != 0.0)
      for (std::size_t v = 0; v < z.size(); ++v) z[v] += row[e] * phi[e][v];
  return z;
}

namespace {

bool inside_mesh(const VolumeMesh& vm, const Vec3& p) {
  if ((p.array() < vm.bbox_min().array()).any() || (p.array() > vm.bbox_max().array()).any()) return false;
  const auto& X = vm.vertices();
  for (const auto& tet : vm.tets()) {
    Mat3 J;
    for (int c = 0; c < 3; ++c) J.col(c) = X[tet[c + 1]] - X[tet[0]];
    const Vec3 l = J.inverse() * (p - X[tet[0]]);
    if (l.minCoeff() >= -1e-10 && l.sum() <= 1.0 + 1e-10) return true;
  }
  return false;
}

}  // namespace

LeadFieldSet build_lead_fields(const VolumeMesh& vm, const std::array<Vec3, kNumElectrodes>& electrodes) {
  LeadFieldSet lf;
  lf.electrodes = electrodes;
  for (int e = 0; e < kNumElectrodes; ++e) {
    if (inside_mesh(vm, electrodes[e]))
      throw InputError(std::string("electrode ") + kElectrodeNames[e] + " lies inside the myocardial mesh");
    lf.phi[e].resize(vm.num_vertices());
    for (std::size_t v = 0; v < vm.num_vertices(); ++v)
      lf.phi[e][v] = 1.0 / (4.0 * kPi * (vm.vertices()[v] - electrodes[e]).norm());
  }
  return lf;
}

// --- forward ECG ---------------------------------------------------------------

EcgTrace compute_ecg(std::span<const double> tau, const VolumeMesh& vm, const ConductivityModel& cm,
                     const LeadFieldSet& lf, const ActionPotentialTemplate& ap, double dt, double horizon) {
  ap.validate();
  cm.validate();
  if (!(dt > 0.0) || !(horizon > 0.0)) throw InputError("ECG dt and horizon must be positive");
  if (tau.size() != vm.num_vertices()) throw InputError("activation field does not match the mesh");
  for (double t : tau)
    if (!std::isfinite(t)) throw NumericError("activation time is not finite on every vertex");
  for (const auto& p : lf.phi)
    if (p.size() != vm.num_vertices()) throw InputError("lead fields do not match the mesh");

  const std::size_t n = static_cast<std::size_t>(std::floor(horizon / dt)) + 1;
  std::array<std::vector<double>, kNumElectrodes> phi;
  for (auto& p : phi) p.assign(n, 0.0);

  // Sample windows outside which U' is negligible (logistic tails below ~1e-13 of the peak).
  const double up = 30.0 * ap.upstroke_width, rep = 30.0 * ap.repol_width;
  double tau_max = -kInf;
  std::vector<double> du(n);
  for (std::size_t t = 0; t < vm.num_tets(); ++t) {
    const auto& tet = vm.tets()[t];
    const auto grads = vm.shape_gradients(t);
    Vec3 gtau = Vec3::Zero();
    double tc = 0.0;
    for (int k = 0; k < 4; ++k) {
      gtau += tau[tet[k]] * grads[k];
      tc += 0.25 * tau[tet[k]];
    }
    tau_max = std::max(tau_max, tc);
    if (gtau.squaredNorm() == 0.0) continue;
    const Vec3 flux = vm.tet_volume(t) * (cm.intracellular(vm.fibers()[t]) * gtau);
    std::array<double, kNumElectrodes> w{};
    for (int e = 0; e < kNumElectrodes; ++e) {
      Vec3 gphi = Vec3::Zero();
      for (int k = 0; k < 4; ++k) gphi += lf.phi[e][tet[k]] * grads[k];
      w[e] = -flux.dot(gphi);
    }
    auto accumulate = [&](double lo, double hi) {
      const long a = std::max(0L, static_cast<long>(std::floor(lo / dt)));
      const long b = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(hi / dt)));
      for (long k = a; k <= b; ++k) {
        const double s = static_cast<double>(k) * dt - tc;
        const double d = (ap(s + 0.5 * dt) - ap(s - 0.5 * dt)) / dt;
        for (int e = 0; e < kNumElectrodes; ++e) phi[e][k] += w[e] * d;
      }
    };
    if (tc + ap.apd - rep <= tc + up) {
      accumulate(tc - up, tc + ap.apd + rep);
    } else {
      accumulate(tc - up, tc + up);
      accumulate(tc + ap.apd - rep, tc + ap.apd + rep);
    }
  }

  EcgTrace tr = leads_from_electrodes(phi, dt);
  double tau_min = *std::min_element(tau.begin(), tau.end());
  tr.qrs_onset = std::max(0.0, tau_min);
  tr.qrs_duration = std::min(horizon, tau_max + 5.0 * ap.upstroke_width) - tr.qrs_onset;
  tr.truncated = tau_max + 5.0 * ap.upstroke_width > horizon;
  return tr;
}

// --- loss --------------------------------------------------------------------

namespace {

struct Window {
  long a, b;  // inclusive sample range of the reference QRS window
};

Window qrs_samples(const EcgTrace& ref) {
  if (!(ref.qrs_duration > 0.0)) throw InputError("reference QRS window is empty");
  long a = static_cast<long>(std::ceil((ref.qrs_onset - ref.t0) / ref.dt - 1e-9));
  long b = static_cast<long>(std::floor((ref.qrs_onset + ref.qrs_duration - ref.t0) / ref.dt + 1e-9));
  a = std::max(a, 0L);
  b = std::min(b, static_cast<long>(ref.size()) - 1);
  if (b <= a) throw InputError("reference QRS window is empty");
  return {a, b};
}

}  // namespace

Alignment align_and_loss(const EcgTrace& ref, const EcgTrace& sim, double max_shift) {
  ref.validate();
  sim.validate();
  if (std::abs(ref.dt - sim.dt) > 1e-9 * ref.dt) throw InputError("reference and simulated ECG use different dt");
  const double off_f = (ref.t0 - sim.t0) / ref.dt;
  const long off = std::lround(off_f);
  if (std::abs(off_f - static_cast<double>(off)) > 1e-6) throw InputError("reference and simulated ECG grids are not aligned");
  const Window w = qrs_samples(ref);
  const long ns = static_cast<long>(sim.size());
  auto sim_at = [&](int l, long k) { return (k >= 0 && k < ns) ? sim.leads[l][k] : 0.0; };

  const long smax = static_cast<long>(std::floor(max_shift / ref.dt + 1e-9));
  long best_s = 0;
  double best_c = -kInf;
  for (long s = -smax; s <= smax; ++s) {
    double c = 0.0;
    for (int l = 0; l < kNumLeads; ++l)
      for (long k = w.a; k <= w.b; ++k) c += ref.leads[l][k] * sim_at(l, k + off + s);
    // Ties resolve to the smallest |shift|, then the negative one.
    if (c > best_c || (c == best_c && std::abs(s) < std::abs(best_s))) best_c = c, best_s = s;
  }

  double integral = 0.0;
  for (long k = w.a; k <= w.b; ++k) {
    double e = 0.0;
    for (int l = 0; l < kNumLeads; ++l) {
      const double d = ref.leads[l][k] - sim_at(l, k + off + best_s);
      e += d * d;
    }
    e /= kNumLeads;
    integral += (k == w.a || k == w.b) ? 0.5 * e : e;
  }
  const double T = static_cast<double>(w.b - w.a) * ref.dt;
  return {static_cast<double>(best_s) * ref.dt, integral * ref.dt / T};
}

double qrs_mean_power(const EcgTrace& ref) {
  const Window w = qrs_samples(ref);
  double integral = 0.0;
  for (long k = w.a; k <= w.b; ++k) {
    double e = 0.0;
    for (int l = 0; l < kNumLeads; ++l) e += ref.leads[l][k] * ref.leads[l][k];
    e /= kNumLeads;
    integral += (k == w.a || k == w.b) ? 0.5 * e : e;
  }
  return integral / static_cast<double>(w.b - w.a);
}

std::vector<double> beat_errors(std::span<const EcgTrace> beats, const EcgTrace& sim, double max_shift) {
  if (beats.size() < 2) throw InputError("at least two beats are required");
  std::vector<double> q;
  q.reserve(beats.size());
  for (const auto& b : beats) q.push_back(align_and_loss(b, sim, max_shift).loss);
  return q;
}

}  // namespace purkinje
