#pragma once

// NV ensemble physics: level structure under a bias field, piecewise-analytic
// Bloch dynamics for one addressed transition, CW-ODMR line shapes with power
// broadening and the optical readout/repolarization transient.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "virtlab/error.hpp"
#include "virtlab/rng.hpp"
#include "virtlab/vec3.hpp"

namespace virtlab::spin {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline std::array<Vec3, 4> nv_orientations() {
  const double k = 1.0 / std::sqrt(3.0);
  return {Vec3{k, k, k}, Vec3{k, -k, -k}, Vec3{-k, k, -k}, Vec3{-k, -k, k}};
}

struct NVEnsembleParams {
  double d_zfs = 2.87e9;      // Hz
  double e_strain = 0.0;      // Hz
  double gamma = 28e9;        // Hz/T
  double t1 = 3e-3;           // s
  double t2 = 30e-6;          // s
  double t2_star = 1e-6;      // s
  double readout_contrast = 0.09;
  double tau_pol = 300e-9;                 // polarization time at reference_laser_rate
  double reference_laser_rate = 5e6;       // 1/s
  double tau_singlet = 200e-9;             // s
  double shelf_fraction = 0.2;             // singlet population at the end of a laser pulse
  double r_sat = 1e5;                      // counts/s per centre
  double n_centers = 1e4;
  double thermal_polarization = 0.0;       // equilibrium w (0: unpolarized)
  double cw_repolarization_per_rate = 1.0; // Gamma_c = k * laser_rate
  double cw_laser_rate_opt = 1e6;          // 1/s, contrast optimum
  double secular_guard = 0.5;              // gamma |B| < guard * D
  std::array<Vec3, 4> orientations = nv_orientations();

  void validate() const {
    auto positive = [](double v) { return v > 0.0; };
    if (!positive(d_zfs)) fail(errc::config, "d_zfs must be > 0");
    if (!positive(gamma)) fail(errc::config, "gamma must be > 0");
    if (!positive(t1) || !positive(t2) || !positive(t2_star)) fail(errc::config, "relaxation times must be > 0");
    if (t2 > 2.0 * t1) fail(errc::config, "t2 must not exceed 2*t1");
    if (t2_star > t2) fail(errc::config, "t2_star must not exceed t2");
    if (!(readout_contrast > 0.0 && readout_contrast < 1.0)) fail(errc::config, "readout_contrast must be in (0,1)");
    if (!(tau_pol >= 100e-9 && tau_pol <= 1e-6)) fail(errc::config, "tau_pol must lie within [100 ns, 1 us]");
    if (!positive(reference_laser_rate)) fail(errc::config, "reference_laser_rate must be > 0");
    if (!positive(tau_singlet)) fail(errc::config, "tau_singlet must be > 0");
    if (!(shelf_fraction >= 0.0 && shelf_fraction < 1.0)) fail(errc::config, "shelf_fraction must be in [0,1)");
    if (!positive(r_sat) || !(n_centers >= 0.0)) fail(errc::config, "r_sat must be > 0 and n_centers >= 0");
    if (!(thermal_polarization >= -1.0 && thermal_polarization <= 1.0)) fail(errc::config, "thermal_polarization must be in [-1,1]");
    if (!positive(cw_repolarization_per_rate) || !positive(cw_laser_rate_opt)) fail(errc::config, "CW rate constants must be > 0");
    if (!(secular_guard > 0.0 && secular_guard <= 1.0)) fail(errc::config, "secular_guard must be in (0,1]");
    for (std::size_t i = 0; i < 4; ++i) {
      if (std::abs(orientations[i].norm() - 1.0) > 1e-9) fail(errc::config, "orientations must be unit vectors");
      for (std::size_t j = i + 1; j < 4; ++j) {
        if (std::abs(std::abs(dot(orientations[i], orientations[j])) - 1.0 / 3.0) > 1e-9)
          fail(errc::config, "orientations must belong to the <111> family (|cos| = 1/3)");
      }
    }
  }

  double tau_pol_at(double laser_rate) const { return tau_pol * reference_laser_rate / laser_rate; }
};

struct BiasField {
  Vec3 tesla;
};

enum class Transition { minus, plus };

struct ResonanceLine {
  double frequency = 0.0;  // Hz
  int orientation_index = 0;
  Transition transition = Transition::minus;
  double weight = 0.0;     // share of all eight (orientation, transition) lines; sums to 1

  /// Fraction of the centres that this line addresses (one transition of the
  /// orientations merged into it).
  double centre_fraction() const { return std::min(1.0, 2.0 * weight); }
};

inline void check_secular(const NVEnsembleParams& p, const BiasField& field) {
  if (p.gamma * field.tesla.norm() >= p.secular_guard * p.d_zfs)
    fail(errc::model_validity, "bias field outside the secular regime (gamma*|B| >= guard*D)");
}

/// Eight transitions D +/- sqrt(E^2 + (gamma B.u_i)^2), merged where they
/// coincide (within 1 Hz) and sorted ascending.
inline std::vector<ResonanceLine> resonance_frequencies(const NVEnsembleParams& p, const BiasField& field) {
  check_secular(p, field);
  std::vector<ResonanceLine> raw;
  raw.reserve(8);
  for (int i = 0; i < 4; ++i) {
    const double zeeman = p.gamma * std::abs(dot(field.tesla, p.orientations[static_cast<std::size_t>(i)]));
    const double split = std::hypot(p.e_strain, zeeman);
    raw.push_back({p.d_zfs - split, i, Transition::minus, 0.125});
    raw.push_back({p.d_zfs + split, i, Transition::plus, 0.125});
  }
  std::stable_sort(raw.begin(), raw.end(), [](const ResonanceLine& a, const ResonanceLine& b) {
    if (a.frequency != b.frequency) return a.frequency < b.frequency;
    if (a.orientation_index != b.orientation_index) return a.orientation_index < b.orientation_index;
    return a.transition < b.transition;
  });
  std::vector<ResonanceLine> merged;
  for (const auto& l : raw) {
    if (!merged.empty() && std::abs(l.frequency - merged.back().frequency) <= 1.0) {
      merged.back().weight += l.weight;
    } else {
      merged.push_back(l);
    }
  }
  return merged;
}

// ---------------------------------------------------------------------------
// CW-ODMR

struct CwLine {
  double center = 0.0;    // Hz
  double fwhm = 0.0;      // Hz
  double contrast = 0.0;  // fractional PL dip depth
  double saturation = 0.0;
};

struct CwSpectrum {
  std::vector<double> frequency;
  std::vector<double> relative_pl;  // 1 - sum of Lorentzian dips
  std::vector<CwLine> lines;
};

/// Laser dependence of the CW contrast: peaks at cw_laser_rate_opt with
/// value 1 and falls off on both sides.
inline double cw_laser_factor(const NVEnsembleParams& p, double laser_rate) {
  const double x = laser_rate / p.cw_laser_rate_opt;
  return x * 2.0 / (1.0 + x * x);
}

inline CwLine cw_line(const NVEnsembleParams& p, const ResonanceLine& line, double rabi_frequency, double laser_rate) {
  const double gamma_p = 1.0 / (std::numbers::pi * p.t2_star);
  const double gamma_c = p.cw_repolarization_per_rate * laser_rate;
  const double s = rabi_frequency * rabi_frequency / (gamma_p * gamma_c);
  CwLine out;
  out.center = line.frequency;
  out.saturation = s;
  out.fwhm = gamma_p * std::sqrt(1.0 + s);
  out.contrast = p.readout_contrast * line.centre_fraction() * s / (1.0 + s) * cw_laser_factor(p, laser_rate);
  return out;
}

inline double lorentzian_peak(double f, double center, double fwhm) {
  const double x = (f - center) / (0.5 * fwhm);
  return 1.0 / (1.0 + x * x);
}

inline CwSpectrum cw_spectrum(const NVEnsembleParams& p, const BiasField& field, double rabi_frequency,
                              double laser_rate, std::span<const double> grid) {
  if (grid.empty()) fail(errc::argument, "cw_spectrum: empty frequency grid");
  if (!(rabi_frequency >= 0.0)) fail(errc::argument, "cw_spectrum: rabi_frequency must be >= 0");
  if (!(laser_rate > 0.0)) fail(errc::argument, "cw_spectrum: laser_rate must be > 0");
  CwSpectrum out;
  for (const auto& line : resonance_frequencies(p, field)) out.lines.push_back(cw_line(p, line, rabi_frequency, laser_rate));
  out.frequency.assign(grid.begin(), grid.end());
  out.relative_pl.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double dip = 0.0;
    for (const auto& l : out.lines) dip += l.contrast * lorentzian_peak(grid[i], l.center, l.fwhm);
    out.relative_pl[i] = 1.0 - dip;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pulsed dynamics of one addressed transition

/// Rotating-frame Bloch vector of the triplet population (norm <= 1 - shelf)
/// plus the metastable singlet population. w = +1 is |0>.
struct SpinState {
  double u = 0.0;
  double v = 0.0;
  double w = 1.0;
  double shelf = 0.0;

  double triplet() const { return 1.0 - shelf; }
  /// Population of the addressed |1> level.
  double p1() const { return std::clamp(0.5 * (triplet() - w), 0.0, 1.0); }
  double bloch_norm() const { return std::sqrt(u * u + v * v + w * w); }
};

/// Relaxation over `t`: shelf empties into |0>, (u,v) dephase with T2, w
/// relaxes to thermal_polarization with T1.
inline SpinState relax(SpinState s, const NVEnsembleParams& p, double t) {
  if (t <= 0.0) return s;
  if (s.shelf > 0.0) {
    const double drained = s.shelf * (1.0 - std::exp(-t / p.tau_singlet));
    s.shelf -= drained;
    s.w += drained;
  }
  const double d2 = std::exp(-t / p.t2);
  s.u *= d2;
  s.v *= d2;
  const double w_eq = p.thermal_polarization * s.triplet();
  s.w = w_eq + (s.w - w_eq) * std::exp(-t / p.t1);
  return s;
}

inline void rotate(SpinState& s, const Vec3& axis_unit, double angle) {
  const Vec3 m{s.u, s.v, s.w};
  const double c = std::cos(angle);
  const double sn = std::sin(angle);
  const Vec3 r = m * c + cross(axis_unit, m) * sn + axis_unit * (dot(axis_unit, m) * (1.0 - c));
  s.u = r.x;
  s.v = r.y;
  s.w = r.z;
}

/// Rectangular MW pulse. `rabi` is angular (rad/s), `detuning` in Hz,
/// `phase` sets the rotation axis in the xy plane. Rotation first, then the
/// decay accumulated over the pulse.
inline SpinState apply_mw_pulse(SpinState s, const NVEnsembleParams& p, double rabi, double detuning,
                                double duration, double phase) {
  if (duration <= 0.0) return s;
  const double delta = kTwoPi * detuning;
  const double omega_eff = std::hypot(rabi, delta);
  if (omega_eff > 0.0) {
    const Vec3 axis{std::cos(phase) * rabi / omega_eff, std::sin(phase) * rabi / omega_eff, delta / omega_eff};
    rotate(s, axis, omega_eff * duration);
  }
  return relax(s, p, duration);
}

/// Free evolution at a fixed detuning (Hz) in the MW rotating frame.
inline SpinState propagate_free(SpinState s, const NVEnsembleParams& p, double duration, double detuning) {
  if (duration <= 0.0) return s;
  const double angle = kTwoPi * detuning * duration;
  const double c = std::cos(angle);
  const double sn = std::sin(angle);
  const double u = s.u * c - s.v * sn;
  const double v = s.u * sn + s.v * c;
  s.u = u;
  s.v = v;
  return relax(s, p, duration);
}

/// Lorentzian (HWHM 1/(2 pi T2*)) static detunings, stratified in the CDF so
/// ensemble averages converge quickly; deterministic in `seed`.
inline std::vector<double> sample_detunings(const NVEnsembleParams& p, std::size_t count, std::uint64_t seed) {
  if (count < 1) fail(errc::argument, "sample_detunings: count must be >= 1");
  std::vector<double> out(count, 0.0);
  if (!std::isfinite(p.t2_star)) return out;
  const double hwhm = 1.0 / (kTwoPi * p.t2_star);
  Rng rng = Rng(seed).split("detunings");
  for (std::size_t k = 0; k < count; ++k) {
    const double u = (static_cast<double>(k) + rng.uniform()) / static_cast<double>(count);
    out[k] = hwhm * std::tan(std::numbers::pi * (u - 0.5));
  }
  return out;
}

struct ReadoutResult {
  std::vector<double> pl;  // counts/s, sampled at i*dt from the laser edge
  SpinState state;         // after the pulse
};

/// PL during a laser pulse: brightness * [1 - C p1(0) exp(-t/tau_pol_eff)].
/// Afterwards the triplet is fully repolarized and `shelf_fraction` sits in the
/// singlet, draining with tau_singlet once the laser is off.
inline ReadoutResult readout_and_repolarize(const SpinState& s, const NVEnsembleParams& p, double laser_rate,
                                            double duration, double dt, double brightness) {
  if (!(dt > 0.0)) fail(errc::argument, "readout: dt must be > 0");
  if (!(duration >= dt)) fail(errc::argument, "readout: duration must be >= dt");
  const double tau = p.tau_pol_at(laser_rate);
  const double p1_0 = s.p1();
  const auto n = static_cast<std::size_t>(std::floor(duration / dt + 1e-9));
  ReadoutResult r;
  r.pl.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * dt;
    r.pl[i] = brightness * (1.0 - p.readout_contrast * p1_0 * std::exp(-t / tau));
  }
  r.state = SpinState{0.0, 0.0, 1.0 - p.shelf_fraction, p.shelf_fraction};
  return r;
}

// ---------------------------------------------------------------------------
// Ensemble of one addressed line

/// MW envelope with linear rise/fall of `edge_time` (0: square). Returns
/// piecewise-constant (relative amplitude, duration) segments.
inline std::vector<std::pair<double, double>> pulse_envelope(double duration, double edge_time) {
  std::vector<std::pair<double, double>> seg;
  if (duration <= 0.0) return seg;
  if (edge_time <= 0.0) {
    seg.emplace_back(1.0, duration);
    return seg;
  }
  constexpr int kSteps = 8;
  const double ramp = std::min(edge_time, 0.5 * duration);
  const double step = ramp / kSteps;
  for (int k = 0; k < kSteps; ++k) seg.emplace_back((k + 0.5) * step / edge_time, step);
  const double plateau = duration - 2.0 * ramp;
  if (plateau > 0.0) seg.emplace_back(ramp / edge_time, plateau);
  for (int k = kSteps - 1; k >= 0; --k) seg.emplace_back((k + 0.5) * step / edge_time, step);
  return seg;
}

/// Inhomogeneously broadened members of the addressed transition plus a
/// spectator population (the other lines) that only sees lasers and T1.
class Ensemble {
public:
  Ensemble(const NVEnsembleParams& p, double addressed_fraction, std::vector<double> detunings)
      : params_(p), fraction_(addressed_fraction), detunings_(std::move(detunings)),
        members_(detunings_.size()) {}

  const NVEnsembleParams& params() const { return params_; }
  double addressed_fraction() const { return fraction_; }
  const std::vector<SpinState>& members() const { return members_; }
  const SpinState& spectator() const { return spectator_; }

  void set_all(const SpinState& s) {
    std::fill(members_.begin(), members_.end(), s);
    spectator_ = s;
  }

  /// `mw_offset`: MW frequency minus line centre (Hz). `edge_time` distorts
  /// the envelope.
  void mw_pulse(double rabi, double mw_offset, double duration, double phase, double edge_time = 0.0) {
    const auto env = pulse_envelope(duration, edge_time);
    for (std::size_t k = 0; k < members_.size(); ++k) {
      const double det = mw_offset - detunings_[k];
      for (const auto& [amp, dt] : env) members_[k] = apply_mw_pulse(members_[k], params_, rabi * amp, det, dt, phase);
    }
    spectator_ = relax(spectator_, params_, duration);
  }

  void free(double duration, double mw_offset) {
    for (std::size_t k = 0; k < members_.size(); ++k)
      members_[k] = propagate_free(members_[k], params_, duration, mw_offset - detunings_[k]);
    spectator_ = relax(spectator_, params_, duration);
  }

  double p1_addressed() const {
    if (members_.empty()) return spectator_.p1();
    double acc = 0.0;
    for (const auto& m : members_) acc += m.p1();
    return acc / static_cast<double>(members_.size());
  }

  double p1_total() const { return fraction_ * p1_addressed() + (1.0 - fraction_) * spectator_.p1(); }

  /// Laser pulse: returns the PL trace and resets everyone.
  std::vector<double> readout(double laser_rate, double duration, double dt, double brightness) {
    SpinState probe;
    probe.shelf = 0.0;
    probe.w = 1.0 - 2.0 * p1_total();
    auto r = readout_and_repolarize(probe, params_, laser_rate, duration, dt, brightness);
    set_all(r.state);
    return std::move(r.pl);
  }

  void repolarize() { set_all(SpinState{0.0, 0.0, 1.0 - params_.shelf_fraction, params_.shelf_fraction}); }

private:
  NVEnsembleParams params_;
  double fraction_;
  std::vector<double> detunings_;
  std::vector<SpinState> members_;
  SpinState spectator_;
};

}  // namespace virtlab::spin
