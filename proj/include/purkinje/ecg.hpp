#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "purkinje/activation.hpp"

namespace purkinje {

/// Analytic action potential: resting + (plateau - resting) * S(xi / w_up) * S(-(xi - apd) / w_rep),
/// S the logistic function. Widths are logistic scales in ms.
struct ActionPotentialTemplate {
  double resting = -85.0;
  double plateau = 15.0;
  double upstroke_width = 1.0;
  double apd = 280.0;
  double repol_width = 20.0;

  void validate() const;
  double operator()(double xi) const;
  double derivative(double xi) const;
};

constexpr int kNumLeads = 12;
constexpr int kNumElectrodes = 9;
extern const std::array<const char*, kNumLeads> kLeadNames;         // I II III aVR aVL aVF V1..V6
extern const std::array<const char*, kNumElectrodes> kElectrodeNames;  // RA LA LL V1..V6

/// 12-lead trace sampled at t0 + k dt. The QRS window is [qrs_onset, qrs_onset + qrs_duration].
struct EcgTrace {
  double dt = 1.0;
  double t0 = 0.0;
  std::array<std::vector<double>, kNumLeads> leads;
  double qrs_onset = 0.0;
  double qrs_duration = 0.0;
  bool truncated = false;

  std::size_t size() const { return leads[0].size(); }
  double time(std::size_t k) const { return t0 + static_cast<double>(k) * dt; }
  /// Largest |V| over all leads inside the QRS window (the whole trace if the window is empty).
  double max_abs() const;
  void scale(double factor);
  void validate() const;
};

/// Standard combinations of the nine electrode signals, rows in kLeadNames order.
const std::array<std::array<double, kNumElectrodes>, kNumLeads>& lead_matrix();
EcgTrace leads_from_electrodes(const std::array<std::vector<double>, kNumElectrodes>& phi, double dt, double t0 = 0.0);

/// QRS window from the lead envelope sqrt(mean_l V_l^2): first and last samples above `fraction` of its peak.
void detect_qrs_window(EcgTrace& trace, double fraction = 0.05);

/// CSV with header t_ms,I,II,...,V6. Loading infers dt and t0 from the time column and detects the QRS window.
void save_ecg_csv(const EcgTrace& trace, const std::filesystem::path& path);
EcgTrace load_ecg_csv(const std::filesystem::path& path);

/// Point-electrode lead fields in an infinite homogeneous medium.
struct LeadFieldSet {
  std::array<Vec3, kNumElectrodes> electrodes;
  /// phi[e][v] = 1 / (4 pi |x_v - x_e|).
  std::array<std::vector<double>, kNumElectrodes> phi;

  /// Z_l at every vertex, assembled from phi with lead_matrix().
  std::vector<double> lead_field(int lead) const;
};

/// Throws InputError if an electrode lies inside or on the mesh.
LeadFieldSet build_lead_fields(const VolumeMesh& vm, const std::array<Vec3, kNumElectrodes>& electrodes);

/// V(t) = sum_tets vol * (-U'(t - tau_c)) * (G_i grad tau . grad phi), per electrode, then
/// combined into leads. U' is averaged over each sample interval (U(t + dt/2 - tau) - U(t - dt/2 - tau)) / dt
/// so that steep upstrokes are not aliased. tau_c is the element mean of tau.
EcgTrace compute_ecg(std::span<const double> tau, const VolumeMesh& vm, const ConductivityModel& cm,
                     const LeadFieldSet& lf, const ActionPotentialTemplate& ap, double dt, double horizon);

struct Alignment {
  double shift = 0.0;  // ms; sim(t + shift) is compared with ref(t)
  double loss = 0.0;
};

/// Integer-sample shift within +-max_shift maximizing the summed cross-correlation over the reference QRS
/// window, then loss = (1/T) int_window mean_l (ref_l(t) - sim_l(t + shift))^2 dt by the trapezoid rule.
/// Samples of sim outside its range count as zero.
Alignment align_and_loss(const EcgTrace& ref, const EcgTrace& sim, double max_shift = 50.0);

/// (1/T) int_window mean_l ref_l(t)^2 dt.
double qrs_mean_power(const EcgTrace& ref);

std::vector<double> beat_errors(std::span<const EcgTrace> beats, const EcgTrace& sim, double max_shift = 50.0);

}  // namespace purkinje
