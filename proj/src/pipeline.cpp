#include "purkinje/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "purkinje/fixtures.hpp"
#include "purkinje/random.hpp"

namespace purkinje {

namespace fs = std::filesystem;
using nlohmann::json;

// --- configuration -------------------------------------------------------------

namespace {

// Reads keys from one JSON object, remembering which were used so leftovers can be rejected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw InputError(path_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw InputError(where(key) + " has the wrong type");
    }
  }

  void get(const char* key, Vec2& out) {
    std::array<double, 2> a{out.x(), out.y()};
    get(key, a);
    out = Vec2(a[0], a[1]);
  }

  void get_path(const char* key, std::optional<fs::path>& out, const fs::path& base) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    if (!it->is_string()) throw InputError(where(key) + " must be a path string");
    fs::path p = it->get<std::string>();
    out = p.is_absolute() || base.empty() ? p : base / p;
  }

  const json* child(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw InputError("unknown configuration key " + where(it.key()));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

int param_index(const std::string& name) {
  for (int k = 0; k < kNumParams; ++k)
    if (name == kParamNames[k]) return k;
  throw InputError("unknown parameter name '" + name + "'");
}

json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
json vec_json(const Vec2& v) { return {v.x(), v.y()}; }

}  // namespace

Eigen::VectorXd default_true_theta() {
  Eigen::VectorXd t(kNumParams);
  t << 35.93, 79.86, 9.42, 18.25, 43.41, 11.59, 1.44, 2.36, 2.36, 2.36, -75.0, 2.0;
  return t;
}

Eigen::VectorXd theta_from_json(const json& j, const Eigen::VectorXd& defaults) {
  Eigen::VectorXd t = defaults;
  if (t.size() != kNumParams) t = Eigen::VectorXd::Zero(kNumParams);
  try {
    if (j.is_array()) {
      if (j.size() != kNumParams) throw InputError("parameter vector needs " + std::to_string(kNumParams) + " values");
      for (int k = 0; k < kNumParams; ++k) t[k] = j[k].get<double>();
    } else if (j.is_object()) {
      for (auto it = j.begin(); it != j.end(); ++it) t[param_index(it.key())] = it->get<double>();
    } else {
      throw InputError("parameter vector must be an array or an object keyed by name");
    }
  } catch (const json::exception&) {
    throw InputError("parameter values must be numbers");
  }
  return t;
}

json theta_to_json(const Eigen::VectorXd& theta) {
  json j = json::object();
  for (int k = 0; k < kNumParams && k < theta.size(); ++k) j[kParamNames[k]] = theta[k];
  return j;
}

RunConfig::RunConfig() : theta_true(default_true_theta()) {
  tree_left.root_uv = Vec2(-0.85, 0.0);
  tree_left.initial_direction_uv = Vec2(1.0, 0.0);
  tree_right.root_uv = Vec2(0.85, 0.0);
  tree_right.initial_direction_uv = Vec2(-1.0, 0.0);
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base) {
  RunConfig c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("jobs", c.jobs);
  std::string mode = "synthetic";
  top.get("mode", mode);
  if (mode == "synthetic") c.mode = FitMode::Synthetic;
  else if (mode == "beats") c.mode = FitMode::Beats;
  else throw InputError("mode must be \"synthetic\" or \"beats\", got \"" + mode + "\"");

  if (auto a = top.child("anatomy")) {
    Section s(*a, "anatomy");
    if (auto f = s.child("fixture")) {
      Section fx(*f, "anatomy.fixture");
      fx.get("voxel_mm", c.fixture_voxel);
      fx.get("surface_rings", c.fixture_surface_rings);
      fx.finish();
    }
    s.get_path("left_endocardium", c.left_endocardium, base);
    s.get_path("right_endocardium", c.right_endocardium, base);
    s.get_path("myocardium", c.myocardium, base);
    if (auto e = s.child("electrodes")) {
      std::array<Vec3, kNumElectrodes> el;
      if (e->is_object()) {
        Section es(*e, "anatomy.electrodes");
        for (int k = 0; k < kNumElectrodes; ++k) {
          std::array<double, 3> p{kInf, kInf, kInf};
          es.get(kElectrodeNames[k], p);
          if (!std::isfinite(p[0])) throw InputError(std::string("anatomy.electrodes.") + kElectrodeNames[k] + " is missing");
          el[k] = Vec3(p[0], p[1], p[2]);
        }
        es.finish();
      } else {
        throw InputError("anatomy.electrodes must be an object keyed by electrode name");
      }
      c.electrodes = el;
    }
    s.finish();
  }

  if (auto t = top.child("tree")) {
    Section s(*t, "tree");
    TreeGrowthConfig& g = c.tree_left;
    s.get("branch_length_mm", g.branch_length);
    s.get("segments_per_branch", g.segments_per_branch);
    s.get("repulsion", g.repulsion);
    s.get("branch_angle_rad", g.branch_angle);
    s.get("generations", g.generations);
    s.get("collision_fraction", g.collision_fraction);
    s.get("left_root_uv", g.root_uv);
    s.get("left_direction_uv", g.initial_direction_uv);
    Vec2 root = c.tree_right.root_uv, dir = c.tree_right.initial_direction_uv;
    s.get("right_root_uv", root);
    s.get("right_direction_uv", dir);
    c.tree_right = g;
    c.tree_right.root_uv = root;
    c.tree_right.initial_direction_uv = dir;
    s.finish();
  }

  if (auto t = top.child("conductivity")) {
    Section s(*t, "conductivity");
    s.get("sigma_il", c.conductivity.sigma_il);
    s.get("sigma_el", c.conductivity.sigma_el);
    s.get("sigma_it", c.conductivity.sigma_it);
    s.get("sigma_et", c.conductivity.sigma_et);
    s.get("alpha", c.conductivity.alpha);
    s.get("velocity_gain", c.conductivity.velocity_gain);
    s.finish();
  }

  if (auto t = top.child("action_potential")) {
    Section s(*t, "action_potential");
    s.get("resting_mv", c.action_potential.resting);
    s.get("plateau_mv", c.action_potential.plateau);
    s.get("upstroke_width_ms", c.action_potential.upstroke_width);
    s.get("apd_ms", c.action_potential.apd);
    s.get("repolarization_width_ms", c.action_potential.repol_width);
    s.finish();
  }

  if (auto t = top.child("coupling")) {
    Section s(*t, "coupling");
    s.get("max_outer_iters", c.max_outer_iters);
    s.get("tol_ms", c.coupling_tol);
    s.finish();
  }

  if (auto t = top.child("eikonal")) {
    Section s(*t, "eikonal");
    std::string stencil = c.eikonal.stencil == Stencil::TwoRing ? "two_ring" : "one_ring";
    s.get("stencil", stencil);
    if (stencil == "two_ring") c.eikonal.stencil = Stencil::TwoRing;
    else if (stencil == "one_ring") c.eikonal.stencil = Stencil::OneRing;
    else throw InputError("eikonal.stencil must be \"one_ring\" or \"two_ring\", got \"" + stencil + "\"");
    s.get("source_radius_mm", c.eikonal.source_radius);
    s.finish();
  }

  if (auto t = top.child("ecg")) {
    Section s(*t, "ecg");
    s.get("dt_ms", c.dt);
    s.get("horizon_ms", c.horizon);
    s.get("max_shift_ms", c.max_shift);
    s.get("lead_gain", c.lead_gain);
    s.finish();
  }

  if (auto t = top.child("bounds")) {
    Section s(*t, "bounds");
    for (int k = 0; k < kNumParams; ++k) {
      std::array<double, 2> lu{c.bounds.lower[k], c.bounds.upper[k]};
      s.get(kParamNames[k], lu);
      c.bounds.lower[k] = lu[0];
      c.bounds.upper[k] = lu[1];
    }
    s.finish();
  }

  if (auto t = top.child("budget")) {
    Section s(*t, "budget");
    RunBudget& b = c.budget;
    s.get("n_init", b.n_init);
    s.get("n_bo", b.n_bo);
    s.get("n_prior_samples", b.n_prior_samples);
    s.get("n_posterior", b.n_posterior);
    s.get("retrain_after", b.retrain_after);
    s.get("accept_threshold", b.accept_threshold);
    s.get("max_abc_evals", b.max_abc_evals);
    s.get("gp_restarts", b.gp_restarts);
    s.get("acquisition_candidates", b.acquisition.candidates);
    s.get("acquisition_polish", b.acquisition.polish);
    s.finish();
  }

  if (auto t = top.child("synthetic")) {
    Section s(*t, "synthetic");
    if (auto th = s.child("theta")) c.theta_true = theta_from_json(*th, c.theta_true);
    s.get("n_beats", c.n_beats);
    s.get("noise_fraction", c.noise_fraction);
    s.finish();
  }

  if (auto t = top.child("beats")) {
    Section s(*t, "beats");
    s.get_path("directory", c.beats_directory, base);
    s.get("qrs_onset_ms", c.qrs_onset);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["jobs"] = jobs;
  j["mode"] = mode == FitMode::Synthetic ? "synthetic" : "beats";
  json a;
  a["fixture"] = {{"voxel_mm", fixture_voxel}, {"surface_rings", fixture_surface_rings}};
  auto path_or_null = [](const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); };
  a["left_endocardium"] = path_or_null(left_endocardium);
  a["right_endocardium"] = path_or_null(right_endocardium);
  a["myocardium"] = path_or_null(myocardium);
  if (electrodes) {
    json e;
    for (int k = 0; k < kNumElectrodes; ++k) e[kElectrodeNames[k]] = vec_json((*electrodes)[k]);
    a["electrodes"] = e;
  } else {
    a["electrodes"] = nullptr;
  }
  j["anatomy"] = a;
  const auto& g = tree_left;
  j["tree"] = {{"branch_length_mm", g.branch_length},
               {"segments_per_branch", g.segments_per_branch},
               {"repulsion", g.repulsion},
               {"branch_angle_rad", g.branch_angle},
               {"generations", g.generations},
               {"collision_fraction", g.collision_fraction},
               {"left_root_uv", vec_json(tree_left.root_uv)},
               {"left_direction_uv", vec_json(tree_left.initial_direction_uv)},
               {"right_root_uv", vec_json(tree_right.root_uv)},
               {"right_direction_uv", vec_json(tree_right.initial_direction_uv)}};
  const auto& cm = conductivity;
  j["conductivity"] = {{"sigma_il", cm.sigma_il}, {"sigma_el", cm.sigma_el}, {"sigma_it", cm.sigma_it},
                       {"sigma_et", cm.sigma_et}, {"alpha", cm.alpha},       {"velocity_gain", cm.velocity_gain}};
  const auto& ap = action_potential;
  j["action_potential"] = {{"resting_mv", ap.resting},
                           {"plateau_mv", ap.plateau},
                           {"upstroke_width_ms", ap.upstroke_width},
                           {"apd_ms", ap.apd},
                           {"repolarization_width_ms", ap.repol_width}};
  j["coupling"] = {{"max_outer_iters", max_outer_iters}, {"tol_ms", coupling_tol}};
  j["eikonal"] = {{"stencil", eikonal.stencil == Stencil::TwoRing ? "two_ring" : "one_ring"},
                  {"source_radius_mm", eikonal.source_radius}};
  j["ecg"] = {{"dt_ms", dt}, {"horizon_ms", horizon}, {"max_shift_ms", max_shift}, {"lead_gain", lead_gain}};
  json b;
  for (int k = 0; k < kNumParams; ++k) b[kParamNames[k]] = {bounds.lower[k], bounds.upper[k]};
  j["bounds"] = b;
  j["budget"] = {{"n_init", budget.n_init},
                 {"n_bo", budget.n_bo},
                 {"n_prior_samples", budget.n_prior_samples},
                 {"n_posterior", budget.n_posterior},
                 {"retrain_after", budget.retrain_after},
                 {"accept_threshold", budget.accept_threshold},
                 {"max_abc_evals", budget.max_abc_evals},
                 {"gp_restarts", budget.gp_restarts},
                 {"acquisition_candidates", budget.acquisition.candidates},
                 {"acquisition_polish", budget.acquisition.polish}};
  j["synthetic"] = {{"theta", theta_to_json(theta_true)}, {"n_beats", n_beats}, {"noise_fraction", noise_fraction}};
  j["beats"] = {{"directory", path_or_null(beats_directory)}, {"qrs_onset_ms", qrs_onset}};
  return j;
}

void RunConfig::validate() const {
  if (jobs < 1) throw InputError("jobs must be at least 1");
  bounds.validate();
  budget.validate();
  tree_left.validate();
  tree_right.validate();
  conductivity.validate();
  action_potential.validate();
  if (!(fixture_voxel > 0.0) || fixture_surface_rings < 2)
    throw InputError("anatomy.fixture needs voxel_mm > 0 and surface_rings >= 2");
  const int paths = (left_endocardium ? 1 : 0) + (right_endocardium ? 1 : 0) + (myocardium ? 1 : 0);
  if (paths != 0 && paths != 3)
    throw InputError("anatomy needs all of left_endocardium, right_endocardium and myocardium, or none");
  for (const auto* p : {&left_endocardium, &right_endocardium, &myocardium})
    if (*p && !fs::exists(**p)) throw InputError("mesh file not found: " + (*p)->string());
  if (paths == 3 && !electrodes) throw InputError("anatomy.electrodes is required with custom meshes");
  if (max_outer_iters < 1 || !(coupling_tol > 0.0)) throw InputError("coupling needs max_outer_iters >= 1 and tol_ms > 0");
  eikonal.validate();
  if (!(dt > 0.0) || !(horizon > dt) || !(max_shift >= 0.0))
    throw InputError("ecg needs dt_ms > 0, horizon_ms > dt_ms and max_shift_ms >= 0");
  if (!(lead_gain > 0.0) || !std::isfinite(lead_gain)) throw InputError("ecg.lead_gain must be positive");
  if (mode == FitMode::Synthetic) {
    if (n_beats < 2) throw InputError("synthetic.n_beats must be at least 2");
    if (!(noise_fraction >= 0.0)) throw InputError("synthetic.noise_fraction must be non-negative");
    if (theta_true.size() != kNumParams || !theta_true.allFinite())
      throw InputError("synthetic.theta must hold " + std::to_string(kNumParams) + " finite values");
  } else {
    if (!beats_directory) throw InputError("beats mode needs beats.directory");
    if (!fs::is_directory(*beats_directory)) throw InputError("beats directory not found: " + beats_directory->string());
  }
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j, fs::absolute(path).parent_path());
}

// --- forward model ---------------------------------------------------------------

Anatomy load_anatomy(const RunConfig& cfg) {
  if (cfg.myocardium) {
    auto left = load_surface(*cfg.left_endocardium);
    auto right = load_surface(*cfg.right_endocardium);
    auto vm = load_volume(*cfg.myocardium);
    auto lf = harmonic_flatten(left), rf = harmonic_flatten(right);
    return Anatomy{std::move(left), std::move(right), std::move(vm), *cfg.electrodes, std::move(lf), std::move(rf)};
  }
  auto fx = make_biventricular(cfg.fixture_voxel, cfg.fixture_surface_rings);
  auto lf = harmonic_flatten(fx.left_endo), rf = harmonic_flatten(fx.right_endo);
  return Anatomy{std::move(fx.left_endo), std::move(fx.right_endo), std::move(fx.myocardium),
                 cfg.electrodes.value_or(fx.electrodes), std::move(lf), std::move(rf)};
}

ForwardModel::ForwardModel(const RunConfig& cfg, Anatomy anatomy) : cfg_(cfg), anatomy_(std::move(anatomy)) {
  solver_ = std::make_unique<MyocardiumSolver>(anatomy_.myocardium, tensor_field(cfg_.conductivity, anatomy_.myocardium),
                                               cfg_.eikonal);
  leads_ = build_lead_fields(anatomy_.myocardium, anatomy_.electrodes);
}

Simulation ForwardModel::simulate(const Eigen::VectorXd& theta, bool require_convergence) const {
  if (theta.size() != kNumParams || !theta.allFinite())
    throw InputError("parameter vector needs " + std::to_string(kNumParams) + " finite values");
  const VentricleParams lv{theta[0], {theta[2], theta[3]}, {theta[6], theta[7]}};
  const VentricleParams rv{theta[1], {theta[4], theta[5]}, {theta[8], theta[9]}};
  Simulation sim;
  sim.trees[0] = grow_tree(anatomy_.left_flat, anatomy_.left_endo, cfg_.tree_left, lv);
  sim.trees[1] = grow_tree(anatomy_.right_flat, anatomy_.right_endo, cfg_.tree_right, rv);
  CouplingConfig cc;
  cc.cv_purkinje = theta[11];
  cc.root_times = root_times_from_rt(theta[10]);
  cc.max_outer_iters = cfg_.max_outer_iters;
  cc.tol = cfg_.coupling_tol;
  sim.activation = solve_coupled({&sim.trees[0], &sim.trees[1]}, *solver_, cc);
  if (!sim.activation.converged && require_convergence) {
    std::ostringstream msg;
    msg << "coupled activation did not converge in " << cfg_.max_outer_iters << " sweeps (last change "
        << (sim.activation.max_change.empty() ? kInf : sim.activation.max_change.back()) << " ms)";
    throw NumericError(msg.str());
  }
  sim.max_activation = *std::max_element(sim.activation.tau_myo.begin(), sim.activation.tau_myo.end());
  if (!std::isfinite(sim.max_activation)) {
    if (require_convergence) throw NumericError("part of the myocardium is never activated");
    return sim;
  }
  sim.ecg = compute_ecg(sim.activation.tau_myo, anatomy_.myocardium, cfg_.conductivity, leads_, cfg_.action_potential,
                        cfg_.dt, cfg_.horizon);
  sim.ecg.scale(cfg_.lead_gain);
  return sim;
}

void ForwardModel::set_reference(Reference ref) {
  if (ref.beats.size() < 2) throw InputError("the reference needs at least two beats");
  ref_ = std::move(ref);
}

ForwardResult ForwardModel::evaluate(const Eigen::VectorXd& theta) const {
  if (ref_.beats.empty()) throw InputError("forward model has no reference");
  Simulation sim = simulate(theta);
  ForwardResult r;
  sim.ecg.scale(ref_.scale);
  const Alignment al = align_and_loss(ref_.ecg, sim.ecg, cfg_.max_shift);
  r.loss = al.loss;
  r.shift = al.shift;
  r.beat_errors = beat_errors(ref_.beats, sim.ecg, cfg_.max_shift);
  r.ecg = std::move(sim.ecg);
  r.trees = std::move(sim.trees);
  r.max_activation = sim.max_activation;
  r.converged = sim.activation.converged;
  return r;
}

Reference make_synthetic_reference(const ForwardModel& model, const Eigen::VectorXd& theta_true, int n_beats,
                                   double noise_fraction, std::mt19937_64& rng) {
  if (n_beats < 2) throw InputError("at least two pseudo-beats are required");
  Simulation sim = model.simulate(theta_true);
  Reference ref;
  const double peak = sim.ecg.max_abs();
  if (!(peak > 0.0)) throw NumericError("the synthetic reference ECG is flat");
  ref.scale = 1.0 / peak;
  ref.ecg = std::move(sim.ecg);
  ref.ecg.scale(ref.scale);
  std::array<double, kNumLeads> sigma{};
  for (int l = 0; l < kNumLeads; ++l) {
    double m = 0.0;
    for (double v : ref.ecg.leads[l]) m = std::max(m, std::abs(v));
    sigma[l] = noise_fraction * m;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int b = 0; b < n_beats; ++b) {
    EcgTrace beat = ref.ecg;
    for (int l = 0; l < kNumLeads; ++l)
      for (double& v : beat.leads[l]) v += sigma[l] * normal(rng);
    ref.beats.push_back(std::move(beat));
  }
  return ref;
}

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& prefix, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && e.path().extension() == ext && name.rfind(prefix, 0) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Reference load_beats_reference(const fs::path& dir, double qrs_onset, double dt) {
  if (!fs::is_directory(dir)) throw InputError("beats directory not found: " + dir.string());
  Reference ref;
  ref.ecg = load_ecg_csv(dir / "mean.csv");
  for (const auto& p : sorted_files(dir, "beat_", ".csv")) ref.beats.push_back(load_ecg_csv(p));
  if (ref.beats.size() < 2) throw InputError(dir.string() + ": at least two beat_*.csv files are required");
  for (const auto* tr : {&ref.ecg, &ref.beats.front()})
    if (std::abs(tr->dt - dt) > 1e-6 * dt)
      throw InputError(dir.string() + ": beats are sampled every " + std::to_string(tr->dt) + " ms but ecg.dt_ms is " +
                       std::to_string(dt));
  const double t0 = std::round((ref.ecg.t0 + qrs_onset - ref.ecg.qrs_onset) / dt) * dt;
  const double onset = ref.ecg.qrs_onset - ref.ecg.t0 + t0;
  const double peak = ref.ecg.max_abs();
  if (!(peak > 0.0)) throw InputError(dir.string() + ": the mean beat is flat");
  ref.scale = 1.0 / peak;
  for (auto* tr : {&ref.ecg}) tr->t0 = t0, tr->qrs_onset = onset, tr->dt = dt, tr->scale(ref.scale);
  for (auto& b : ref.beats) {
    if (b.size() != ref.ecg.size()) throw InputError(dir.string() + ": beats and mean differ in length");
    b.t0 = t0;
    b.dt = dt;
    b.qrs_onset = onset;
    b.qrs_duration = ref.ecg.qrs_duration;
    b.scale(ref.scale);
  }
  return ref;
}

Reference build_reference(const ForwardModel& model) {
  const auto& cfg = model.config();
  if (cfg.mode == FitMode::Beats) return load_beats_reference(*cfg.beats_directory, cfg.qrs_onset, cfg.dt);
  auto rng = substream(cfg.seed, "beats");
  return make_synthetic_reference(model, cfg.theta_true, cfg.n_beats, cfg.noise_fraction, rng);
}

fs::path versioned_path(const fs::path& path) {
  if (!fs::exists(path)) return path;
  for (int k = 1;; ++k) {
    fs::path p = path;
    p += "-" + std::to_string(k);
    if (!fs::exists(p)) return p;
  }
}

// --- beat ingestion --------------------------------------------------------------

void detrend(EcgTrace& beat) {
  const std::size_t n = beat.size();
  constexpr std::size_t kEnd = 10;
  if (n < 2 * kEnd) throw InputError("a beat needs at least 20 samples to detrend");
  const double c1 = 0.5 * (kEnd - 1), c2 = static_cast<double>(n) - 0.5 * (kEnd + 1);
  for (auto& lead : beat.leads) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t k = 0; k < kEnd; ++k) m1 += lead[k], m2 += lead[n - kEnd + k];
    m1 /= kEnd;
    m2 /= kEnd;
    const double slope = (m2 - m1) / (c2 - c1);
    for (std::size_t k = 0; k < n; ++k) lead[k] -= m1 + slope * (static_cast<double>(k) - c1);
  }
}

std::size_t r_peak(const EcgTrace& beat) {
  const auto& ii = beat.leads[1];
  if (ii.empty()) throw InputError("empty beat");
  std::size_t best = 0;
  for (std::size_t k = 1; k < ii.size(); ++k)
    if (std::abs(ii[k]) > std::abs(ii[best])) best = k;
  return best;
}

BeatSet ingest_beats(std::vector<EcgTrace> raw) {
  if (raw.empty()) throw InputError("no beats to ingest");
  const double dt = raw[0].dt;
  for (std::size_t b = 0; b < raw.size(); ++b) {
    raw[b].validate();
    if (std::abs(raw[b].dt - dt) > 1e-6 * dt)
      throw InputError("beat " + std::to_string(b) + " is sampled every " + std::to_string(raw[b].dt) +
                       " ms, the first beat every " + std::to_string(dt) + " ms");
    detrend(raw[b]);
  }
  std::vector<std::size_t> peaks;
  std::size_t pre = SIZE_MAX, post = SIZE_MAX;
  for (const auto& b : raw) {
    peaks.push_back(r_peak(b));
    pre = std::min(pre, peaks.back());
    post = std::min(post, b.size() - peaks.back());
  }
  BeatSet set;
  set.r_index = pre;
  const std::size_t n = pre + post;
  for (std::size_t b = 0; b < raw.size(); ++b) {
    EcgTrace tr;
    tr.dt = dt;
    tr.t0 = 0.0;
    for (int l = 0; l < kNumLeads; ++l) {
      const auto first = raw[b].leads[l].begin() + static_cast<long>(peaks[b] - pre);
      tr.leads[l].assign(first, first + static_cast<long>(n));
    }
    set.beats.push_back(std::move(tr));
  }
  set.mean = set.lower = set.upper = set.beats[0];
  for (int l = 0; l < kNumLeads; ++l)
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0, lo = kInf, hi = -kInf;
      for (const auto& b : set.beats) {
        const double v = b.leads[l][k];
        s += v, lo = std::min(lo, v), hi = std::max(hi, v);
      }
      set.mean.leads[l][k] = s / static_cast<double>(set.beats.size());
      set.lower.leads[l][k] = lo;
      set.upper.leads[l][k] = hi;
    }
  detect_qrs_window(set.mean);
  for (auto* tr : {&set.lower, &set.upper}) tr->qrs_onset = set.mean.qrs_onset, tr->qrs_duration = set.mean.qrs_duration;
  for (auto& b : set.beats) b.qrs_onset = set.mean.qrs_onset, b.qrs_duration = set.mean.qrs_duration;
  return set;
}

// --- commands --------------------------------------------------------------------

namespace {

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

fs::path fresh_dir(const fs::path& out) {
  fs::path dir = versioned_path(out);
  fs::create_directories(dir);
  return dir;
}

json comparable(json cfg) {
  cfg.erase("jobs");
  return cfg;
}

}  // namespace

void cmd_flatten(const fs::path& surface, const fs::path& out) {
  if (!fs::exists(surface)) throw InputError("surface file not found: " + surface.string());
  FlatMap fm;
  try {
    fm = harmonic_flatten(load_surface(surface));
  } catch (const InputError& e) {
    throw InputError(surface.string() + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(surface.string() + ": " + e.what());
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_flatmap(fm, versioned_path(out));
}

fs::path cmd_grow(const RunConfig& cfg, const Eigen::VectorXd& theta, const fs::path& out) {
  if (theta.size() != kNumParams) throw InputError("parameter vector needs " + std::to_string(kNumParams) + " values");
  Anatomy a = load_anatomy(cfg);
  const VentricleParams lv{theta[0], {theta[2], theta[3]}, {theta[6], theta[7]}};
  const VentricleParams rv{theta[1], {theta[4], theta[5]}, {theta[8], theta[9]}};
  auto left = grow_tree(a.left_flat, a.left_endo, cfg.tree_left, lv);
  auto right = grow_tree(a.right_flat, a.right_endo, cfg.tree_right, rv);
  const fs::path dir = fresh_dir(out);
  save_tree(left, dir / "tree_left.json");
  save_tree(right, dir / "tree_right.json");
  save_tree_obj(left, dir / "tree_left.obj");
  save_tree_obj(right, dir / "tree_right.obj");
  return dir;
}

fs::path cmd_forward(const RunConfig& cfg, const Eigen::VectorXd& theta, const fs::path& out) {
  ForwardModel model(cfg, load_anatomy(cfg));
  Simulation sim = model.simulate(theta, false);
  const fs::path dir = fresh_dir(out);
  const auto& af = sim.activation;
  json s;
  s["theta"] = theta_to_json(theta);
  s["converged"] = af.converged;
  s["iterations"] = af.iterations;
  s["max_change_ms"] = af.max_change;
  s["snapped_pmjs"] = af.snapped_pmjs;
  s["max_activation_ms"] = sim.max_activation;
  s["pmjs"] = {sim.trees[0].pmjs.size(), sim.trees[1].pmjs.size()};
  save_tree(sim.trees[0], dir / "tree_left.json");
  save_tree(sim.trees[1], dir / "tree_right.json");
  save_activation_csv(af.tau_myo, dir / "activation.csv");
  if (std::isfinite(sim.max_activation)) {
    save_activation_vtk(model.anatomy().myocardium, af.tau_myo, dir / "activation.vtk");
    save_ecg_csv(sim.ecg, dir / "ecg.csv");
    s["qrs_onset_ms"] = sim.ecg.qrs_onset;
    s["qrs_duration_ms"] = sim.ecg.qrs_duration;
    s["truncated"] = sim.ecg.truncated;
  }
  write_json(s, dir / "summary.json");
  if (!af.converged) throw NumericError("coupled activation did not converge; partial output in " + dir.string());
  if (!std::isfinite(sim.max_activation)) throw NumericError("part of the myocardium is never activated");
  return dir;
}

FitOutcome cmd_fit(const RunConfig& cfg, const fs::path& out, const Logger& log) {
  cfg.validate();
  const json cfg_json = cfg.to_json();
  FitOutcome fo;
  if (fs::exists(out / "status.json") && fs::exists(out / "run_config.json")) {
    const json status = read_json(out / "status.json");
    const std::string state = status.value("state", "");
    if (state != "complete" && state != "budget_exhausted" &&
        comparable(read_json(out / "run_config.json")) == comparable(cfg_json))
      fo.resumed = true;
  }
  fo.run_dir = fo.resumed ? out : fresh_dir(out);
  if (!fo.resumed) write_json(cfg_json, fo.run_dir / "run_config.json");
  if (log) log((fo.resumed ? "resuming run in " : "starting run in ") + fo.run_dir.string());

  ForwardModel model(cfg, load_anatomy(cfg));
  model.set_reference(build_reference(model));
  if (!fs::exists(fo.run_dir / "reference.csv")) save_ecg_csv(model.reference().ecg, fo.run_dir / "reference.csv");

  RunOptions opt;
  opt.out_dir = fo.run_dir;
  opt.jobs = cfg.jobs;
  opt.log = log;
  if (fo.resumed && fs::exists(fo.run_dir / "records.csv")) opt.cached = load_records(fo.run_dir);
  if (log && !opt.cached.empty()) log("found " + std::to_string(opt.cached.size()) + " cached evaluations");
  fo.result = run_identification(cfg.bounds, [&](const Eigen::VectorXd& t) { return model.evaluate(t); }, cfg.budget,
                                 cfg.seed, opt);
  fo.status = fo.result.status;
  return fo;
}

PaceSummary cmd_pace(const fs::path& run_dir, const Logger& log) {
  const fs::path ens = run_dir / "ensemble";
  if (!fs::is_directory(ens)) throw InputError("no ensemble in " + run_dir.string());
  std::vector<fs::path> members;
  for (const auto& e : fs::directory_iterator(ens))
    if (e.is_directory() && fs::exists(e.path() / "member.json")) members.push_back(e.path());
  std::sort(members.begin(), members.end());
  if (members.empty()) throw InputError("the ensemble in " + run_dir.string() + " has no members");

  const RunConfig cfg = load_config(run_dir / "run_config.json");
  ForwardModel model(cfg, load_anatomy(cfg));
  const double scale = build_reference(model).scale;

  PaceSummary summary;
  summary.out_dir = fresh_dir(run_dir / "pacing");
  json rows = json::array();
  for (const auto& m : members) {
    const json mj = read_json(m / "member.json");
    PacedMember pm;
    pm.name = m.filename().string();
    pm.theta = theta_from_json(mj.at("theta"), Eigen::VectorXd());
    pm.max_activation_fitted = mj.at("max_activation").get<double>();
    Eigen::VectorXd paced = pm.theta;
    paced[10] = 0.0;
    Simulation sim = model.simulate(paced);
    pm.max_activation_paced = sim.max_activation;
    sim.ecg.scale(scale);
    const fs::path md = summary.out_dir / pm.name;
    fs::create_directories(md);
    save_ecg_csv(sim.ecg, md / "ecg.csv");
    save_activation_csv(sim.activation.tau_myo, md / "activation.csv");
    save_activation_vtk(model.anatomy().myocardium, sim.activation.tau_myo, md / "activation.vtk");
    rows.push_back({{"member", pm.name},
                    {"rt_fitted_ms", pm.theta[10]},
                    {"max_activation_fitted_ms", pm.max_activation_fitted},
                    {"max_activation_paced_ms", pm.max_activation_paced},
                    {"reduced", pm.max_activation_paced < pm.max_activation_fitted}});
    if (log)
      log(pm.name + ": max activation " + std::to_string(pm.max_activation_fitted) + " -> " +
          std::to_string(pm.max_activation_paced) + " ms");
    summary.members.push_back(std::move(pm));
  }
  std::vector<std::size_t> order(summary.members.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return summary.members[a].max_activation_paced < summary.members[b].max_activation_paced;
  });
  summary.selection = {order.front(), order[(order.size() - 1) / 2], order.back()};
  json j;
  j["members"] = rows;
  j["sorted_by_paced_max_activation"] = json::array();
  for (auto i : order) j["sorted_by_paced_max_activation"].push_back(summary.members[i].name);
  j["selection"] = {{"min", summary.members[summary.selection[0]].name},
                    {"median", summary.members[summary.selection[1]].name},
                    {"max", summary.members[summary.selection[2]].name}};
  write_json(j, summary.out_dir / "summary.json");
  return summary;
}

fs::path cmd_ingest_beats(const fs::path& in_dir, const fs::path& out) {
  if (!fs::is_directory(in_dir)) throw InputError("beat directory not found: " + in_dir.string());
  const auto files = sorted_files(in_dir, "", ".csv");
  if (files.empty()) throw InputError("no *.csv beats in " + in_dir.string());
  std::vector<EcgTrace> raw;
  for (const auto& f : files) raw.push_back(load_ecg_csv(f));
  BeatSet set = ingest_beats(std::move(raw));
  const fs::path dir = fresh_dir(out);
  for (std::size_t b = 0; b < set.beats.size(); ++b) {
    char name[32];
    std::snprintf(name, sizeof name, "beat_%03zu.csv", b);
    save_ecg_csv(set.beats[b], dir / name);
  }
  save_ecg_csv(set.mean, dir / "mean.csv");
  save_ecg_csv(set.lower, dir / "lower.csv");
  save_ecg_csv(set.upper, dir / "upper.csv");
  json j;
  j["count"] = set.beats.size();
  j["dt_ms"] = set.mean.dt;
  j["r_index"] = set.r_index;
  j["qrs_onset_ms"] = set.mean.qrs_onset;
  j["qrs_duration_ms"] = set.mean.qrs_duration;
  j["sources"] = json::array();
  for (const auto& f : files) j["sources"].push_back(f.filename().string());
  write_json(j, dir / "beats.json");
  return dir;
}

fs::path cmd_fixtures(const fs::path& out, double voxel, int surface_rings) {
  auto fx = make_biventricular(voxel, surface_rings);
  const fs::path dir = fresh_dir(out);
  save_surface_obj(fx.left_endo, dir / "left_endocardium.obj");
  save_surface_obj(fx.right_endo, dir / "right_endocardium.obj");
  save_volume(fx.myocardium, dir / "myocardium.vol");
  RunConfig cfg;
  cfg.left_endocardium = "left_endocardium.obj";
  cfg.right_endocardium = "right_endocardium.obj";
  cfg.myocardium = "myocardium.vol";
  cfg.electrodes = fx.electrodes;
  write_json(cfg.to_json(), dir / "config.json");
  return dir;
}

}  // namespace purkinje
