#include <doctest.h>

#include <filesystem>
#include <random>

#include "purkinje/ecg.hpp"
#include "purkinje/fixtures.hpp"

using namespace purkinje;

namespace {

std::array<Vec3, kNumElectrodes> far_electrodes(double r) {
  std::array<Vec3, kNumElectrodes> e;
  for (int i = 0; i < kNumElectrodes; ++i) {
    const double a = 2.0 * kPi * i / kNumElectrodes;
    e[i] = Vec3(r * std::cos(a), r * std::sin(a), 0.3 * r * std::sin(3.0 * a));
  }
  return e;
}

void check_lead_identities(const EcgTrace& tr) {
  double scale = 0.0, err = 0.0;
  for (std::size_t k = 0; k < tr.size(); ++k) {
    const double I = tr.leads[0][k], II = tr.leads[1][k], III = tr.leads[2][k];
    const double aVR = tr.leads[3][k], aVL = tr.leads[4][k], aVF = tr.leads[5][k];
    scale = std::max({scale, std::abs(I), std::abs(II), std::abs(III)});
    err = std::max({err, std::abs(I + III - II), std::abs(aVR + aVL + aVF), std::abs(aVR + 0.5 * (I + II)),
                    std::abs(aVL - 0.5 * (I - III)), std::abs(aVF - 0.5 * (II + III))});
  }
  CHECK(err <= 1e-9 * std::max(scale, 1e-300) + 1e-15);
}

EcgTrace synthetic_trace(std::size_t n, double dt, std::mt19937_64& rng) {
  EcgTrace tr;
  tr.dt = dt;
  std::normal_distribution<double> amp(0.0, 1.0);
  for (auto& lead : tr.leads) {
    const double a = amp(rng), b = amp(rng);
    lead.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double t = static_cast<double>(k) * dt;
      lead[k] = a * std::exp(-std::pow((t - 120.0) / 15.0, 2)) + b * std::exp(-std::pow((t - 160.0) / 25.0, 2));
    }
  }
  tr.qrs_onset = 80.0;
  tr.qrs_duration = 120.0;
  return tr;
}

}  // namespace

TEST_CASE("action potential template and its derivative") {
  ActionPotentialTemplate ap;
  CHECK(ap(-200.0) == doctest::Approx(ap.resting).epsilon(1e-12));
  auto S = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  CHECK(ap(100.0) == doctest::Approx(ap.resting + (ap.plateau - ap.resting) * S(100.0) * S(9.0)).epsilon(1e-12));
  CHECK(ap(1000.0) == doctest::Approx(ap.resting).epsilon(1e-12));
  for (double xi : {-3.0, -0.5, 0.0, 0.7, 5.0, 250.0, 280.0, 300.0}) {
    const double h = 1e-5;
    const double fd = (ap(xi + h) - ap(xi - h)) / (2.0 * h);
    CHECK(ap.derivative(xi) == doctest::Approx(fd).epsilon(1e-6).scale(1e-6));
  }
  ap.upstroke_width = 0.0;
  CHECK_THROWS_AS(ap.validate(), InputError);
}

TEST_CASE("lead matrix reproduces the limb, augmented and precordial leads") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::array<std::vector<double>, kNumElectrodes> phi;
  for (auto& p : phi) p = {n(rng), n(rng), n(rng)};
  auto tr = leads_from_electrodes(phi, 2.0, -4.0);
  CHECK(tr.size() == 3);
  CHECK(tr.time(2) == 0.0);
  enum { RA, LA, LL };
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(tr.leads[0][k] == doctest::Approx(phi[LA][k] - phi[RA][k]));
    CHECK(tr.leads[3][k] == doctest::Approx(phi[RA][k] - 0.5 * (phi[LA][k] + phi[LL][k])));
    const double wct = (phi[RA][k] + phi[LA][k] + phi[LL][k]) / 3.0;
    for (int v = 0; v < 6; ++v) CHECK(tr.leads[6 + v][k] == doctest::Approx(phi[3 + v][k] - wct));
  }
  check_lead_identities(tr);
}

TEST_CASE("uniform activation produces no ECG") {
  auto vm = make_box_mesh(Vec3::Zero(), Vec3(10, 10, 10), 4, 4, 4, Vec3(1, 1, 0).normalized());
  auto lf = build_lead_fields(vm, far_electrodes(60.0));
  std::vector<double> tau(vm.num_vertices(), 17.0);
  auto tr = compute_ecg(tau, vm, ConductivityModel{}, lf, ActionPotentialTemplate{}, 1.0, 400.0);
  double m = 0.0;
  for (const auto& lead : tr.leads)
    for (double v : lead) m = std::max(m, std::abs(v));
  CHECK(m < 1e-12);
}

TEST_CASE("single tetrahedron against a hand-assembled dipole sum") {
  std::vector<Vec3> verts{Vec3(0, 0, 0), Vec3(4, 0, 0), Vec3(0, 5, 0), Vec3(0, 0, 6)};
  VolumeMesh vm(verts, {{0, 1, 2, 3}}, {Vec3(0, 0.6, 0.8)});
  const auto electrodes = far_electrodes(40.0);
  auto lf = build_lead_fields(vm, electrodes);
  const std::vector<double> tau{10.0, 14.0, 13.0, 20.0};
  ConductivityModel cm;
  ActionPotentialTemplate ap;
  const double dt = 0.5, horizon = 200.0;
  auto tr = compute_ecg(tau, vm, cm, lf, ap, dt, horizon);

  // grad tau and grad phi from the explicit inverse of the edge matrix.
  Mat3 E;
  for (int k = 0; k < 3; ++k) E.col(k) = verts[k + 1] - verts[0];
  const Mat3 Einv_t = E.inverse().transpose();
  auto gradient = [&](const std::array<double, 4>& f) {
    return Vec3(Einv_t * Vec3(f[1] - f[0], f[2] - f[0], f[3] - f[0]));
  };
  const Vec3 gtau = gradient({tau[0], tau[1], tau[2], tau[3]});
  const double vol = std::abs(E.determinant()) / 6.0;
  const double tc = 0.25 * (tau[0] + tau[1] + tau[2] + tau[3]);
  Mat3 Gi = cm.sigma_it * Mat3::Identity() + (cm.sigma_il - cm.sigma_it) * Vec3(0, 0.6, 0.8) * Vec3(0, 0.6, 0.8).transpose();
  std::array<double, kNumElectrodes> w;
  for (int e = 0; e < kNumElectrodes; ++e) {
    std::array<double, 4> phi;
    for (int k = 0; k < 4; ++k) phi[k] = 1.0 / (4.0 * kPi * (verts[k] - electrodes[e]).norm());
    w[e] = -vol * (Gi * gtau).dot(gradient(phi));
  }
  const auto& M = lead_matrix();
  double err = 0.0, peak = 0.0;
  for (std::size_t k = 0; k < tr.size(); ++k) {
    const double s = static_cast<double>(k) * dt - tc;
    const double d = (ap(s + 0.5 * dt) - ap(s - 0.5 * dt)) / dt;
    for (int l = 0; l < kNumLeads; ++l) {
      double v = 0.0;
      for (int e = 0; e < kNumElectrodes; ++e) v += M[l][e] * w[e] * d;
      err = std::max(err, std::abs(v - tr.leads[l][k]));
      peak = std::max(peak, std::abs(v));
    }
  }
  CHECK(peak > 0.0);
  CHECK(err <= 1e-9 * peak);
  CHECK(tr.qrs_onset == 10.0);
  CHECK_FALSE(tr.truncated);
}

TEST_CASE("lead fields: point-source potential and rejection of electrodes inside the mesh") {
  auto vm = make_box_mesh(Vec3::Zero(), Vec3(2, 2, 2), 2, 2, 2);
  auto e = far_electrodes(30.0);
  auto lf = build_lead_fields(vm, e);
  CHECK(lf.phi[4][7] == doctest::Approx(1.0 / (4.0 * kPi * (vm.vertices()[7] - e[4]).norm())).epsilon(1e-14));
  auto z = lf.lead_field(1);
  CHECK(z[3] == doctest::Approx(lf.phi[2][3] - lf.phi[0][3]).epsilon(1e-14));
  e[5] = Vec3(1, 1, 1);
  CHECK_THROWS_AS(build_lead_fields(vm, e), InputError);
}

TEST_CASE("ECG on a box: lead identities hold for a travelling front") {
  auto vm = make_box_mesh(Vec3::Zero(), Vec3(20, 10, 10), 8, 4, 4, Vec3(1, 0, 0));
  auto lf = build_lead_fields(vm, far_electrodes(80.0));
  std::vector<double> tau(vm.num_vertices());
  for (std::size_t v = 0; v < tau.size(); ++v) tau[v] = 5.0 + vm.vertices()[v].x() / 0.6;
  auto tr = compute_ecg(tau, vm, ConductivityModel{}, lf, ActionPotentialTemplate{}, 1.0, 400.0);
  check_lead_identities(tr);
  CHECK(tr.max_abs() > 0.0);
  CHECK(tr.qrs_onset == 5.0);
}

TEST_CASE("alignment recovers a pure delay and the loss of an offset") {
  std::mt19937_64 rng(9);
  auto ref = synthetic_trace(400, 1.0, rng);
  EcgTrace sim = ref;
  for (auto& lead : sim.leads) {
    std::vector<double> d(lead.size(), 0.0);
    for (std::size_t k = 12; k < lead.size(); ++k) d[k] = lead[k - 12];
    lead = d;
  }
  auto a = align_and_loss(ref, sim, 50.0);
  CHECK(a.shift == 12.0);
  CHECK(a.loss < 1e-20);

  EcgTrace off = ref;
  const double c = 0.3;
  for (double& v : off.leads[4]) v += c;
  auto b = align_and_loss(ref, off, 50.0);
  CHECK(b.shift == 0.0);
  CHECK(b.loss == doctest::Approx(c * c / kNumLeads).epsilon(1e-12));

  CHECK(align_and_loss(ref, ref, 0.0).loss == 0.0);
  CHECK(qrs_mean_power(ref) == doctest::Approx(align_and_loss(ref, EcgTrace{1.0, 0.0, {}, 0, 0}, 0.0).loss));
}

TEST_CASE("beat errors of noisy copies average to the noise variance") {
  std::mt19937_64 rng(21);
  auto ref = synthetic_trace(12000, 0.01, rng);
  ref.qrs_onset = 10.0;
  ref.qrs_duration = 100.0;
  const double sigma = 0.05;
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<EcgTrace> beats(4, ref);
  for (auto& b : beats)
    for (auto& lead : b.leads)
      for (double& v : lead) v += noise(rng);
  auto q = beat_errors(beats, ref, 0.0);
  REQUIRE(q.size() == 4);
  for (double e : q) CHECK(e == doctest::Approx(sigma * sigma).epsilon(0.1));
  CHECK_THROWS_AS(beat_errors(std::span<const EcgTrace>(beats.data(), 1), ref), InputError);
}

TEST_CASE("ECG CSV round trip") {
  std::mt19937_64 rng(2);
  auto tr = synthetic_trace(300, 1.0, rng);
  tr.t0 = -20.0;
  auto path = std::filesystem::temp_directory_path() / "purkinje_test_ecg.csv";
  save_ecg_csv(tr, path);
  auto back = load_ecg_csv(path);
  CHECK(back.dt == doctest::Approx(1.0));
  CHECK(back.t0 == doctest::Approx(-20.0));
  for (int l = 0; l < kNumLeads; ++l)
    for (std::size_t k = 0; k < tr.size(); ++k) CHECK(back.leads[l][k] == tr.leads[l][k]);
  CHECK(back.qrs_duration > 0.0);
}
