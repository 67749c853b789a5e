#pragma once

// Virtual hardware: each instrument is a small state machine or a pure
// transform behind the contract a real driver would offer (set/step/emit,
// detect, acquire). They own no threads; the acquisition engine drives them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "virtlab/error.hpp"
#include "virtlab/optics.hpp"
#include "virtlab/rng.hpp"
#include "virtlab/vec3.hpp"

namespace virtlab::instruments {

// ---------------------------------------------------------------------------
// MW source

enum class MwMode { cw, sweep, list };

inline const char* to_string(MwMode m) {
  switch (m) {
    case MwMode::cw: return "cw";
    case MwMode::sweep: return "sweep";
    case MwMode::list: return "list";
  }
  return "?";
}

struct MwSourceConfig {
  double min_dwell = 1e-3;         // s per frequency step
  double rabi_at_ref = 5e6;        // Hz (Rabi frequency, not angular) at ref_power_dbm
  double ref_power_dbm = 10.0;
  double power_dbm = 10.0;
  double max_power_dbm = 30.0;
};

class MwSource {
public:
  explicit MwSource(MwSourceConfig cfg = {}) : cfg_(cfg), power_dbm_(cfg.power_dbm) {}

  void set_cw(double f) {
    check_frequency(f);
    mode_ = MwMode::cw;
    cw_ = f;
    cursor_ = 0;
  }

  void set_sweep(double f_start, double f_stop, double f_step) {
    check_frequency(f_start);
    check_frequency(f_stop);
    if (!(f_step > 0.0) || f_stop < f_start) fail(errc::argument, "sweep needs f_step > 0 and f_stop >= f_start");
    mode_ = MwMode::sweep;
    start_ = f_start;
    stop_ = f_stop;
    step_ = f_step;
    n_sweep_ = static_cast<std::size_t>(std::floor((f_stop - f_start) / f_step + 1e-9)) + 1;
    cursor_ = 0;
  }

  void set_list(std::vector<double> freqs) {
    if (freqs.empty()) fail(errc::argument, "frequency list is empty");
    for (double f : freqs) check_frequency(f);
    mode_ = MwMode::list;
    list_ = std::move(freqs);
    cursor_ = 0;
  }

  void set_power(double dbm) {
    if (!std::isfinite(dbm) || dbm > cfg_.max_power_dbm) fail(errc::range, "MW power outside [-inf, max_power_dbm]");
    power_dbm_ = dbm;
  }
  void set_output(bool on) { on_ = on; }

  /// TTL-triggered advance. `now` is simulated time; steps closer together
  /// than min_dwell are logged as timing violations, not refused.
  void step(double now) {
    if (mode_ == MwMode::cw) fail(errc::mode, "cannot step the MW source in cw mode");
    if (!on_) fail(errc::mode, "cannot step the MW source with output off");
    if (has_stepped_ && now - last_step_ < cfg_.min_dwell * (1.0 - 1e-9)) {
      std::ostringstream os;
      os << "timing: MW step at t=" << now << " s after " << (now - last_step_) << " s < min_dwell " << cfg_.min_dwell;
      log_.push_back(os.str());
    }
    has_stepped_ = true;
    last_step_ = now;
    const std::size_t n = mode_ == MwMode::sweep ? n_sweep_ : list_.size();
    cursor_ = (cursor_ + 1) % n;
  }

  double frequency() const {
    double f = cw_;
    if (mode_ == MwMode::sweep) f = start_ + static_cast<double>(cursor_) * step_;
    if (mode_ == MwMode::list) f = list_[cursor_];
    if (heating_offset) f += heating_offset(f);
    return f;
  }

  /// Rabi frequency in Hz; amplitude scales with sqrt of power.
  double rabi_hz() const {
    if (!on_) return 0.0;
    return cfg_.rabi_at_ref * std::pow(10.0, (power_dbm_ - cfg_.ref_power_dbm) / 20.0);
  }

  MwMode mode() const { return mode_; }
  std::size_t cursor() const { return cursor_; }
  bool output_on() const { return on_; }
  double power_dbm() const { return power_dbm_; }
  const MwSourceConfig& config() const { return cfg_; }
  const std::vector<std::string>& log() const { return log_; }

  std::string dummy_info() const {
    std::ostringstream os;
    os << "virtual MW source: mode=" << to_string(mode_) << " f=" << frequency() << " Hz power=" << power_dbm_
       << " dBm output=" << (on_ ? "on" : "off") << " min_dwell=" << cfg_.min_dwell << " s";
    return os.str();
  }

  /// Antenna-heating hook (frequency-dependent offset, Hz). Empty by default.
  std::function<double(double)> heating_offset;

private:
  static void check_frequency(double f) {
    if (!(f > 0.0) || !std::isfinite(f)) fail(errc::argument, "MW frequency must be positive");
  }

  MwSourceConfig cfg_;
  MwMode mode_ = MwMode::cw;
  double cw_ = 2.87e9;
  double start_ = 0.0, stop_ = 0.0, step_ = 0.0;
  std::size_t n_sweep_ = 1;
  std::vector<double> list_;
  std::size_t cursor_ = 0;
  double power_dbm_;
  bool on_ = false;
  bool has_stepped_ = false;
  double last_step_ = 0.0;
  std::vector<std::string> log_;
};

// ---------------------------------------------------------------------------
// Pulse generator program

enum Channel : unsigned { ch_laser = 0, ch_mw = 1, ch_sync = 2, ch_spare = 3 };

inline constexpr std::uint32_t bit(Channel c) { return 1u << c; }

struct Instruction {
  std::uint32_t mask = 0;
  std::int64_t duration_ns = 0;
  double phase = 0.0;  // MW phase metadata, meaningful while ch_mw is set

  bool operator==(const Instruction&) const = default;
};

struct ProgramBlock {
  std::vector<Instruction> instructions;
  std::int64_t repeat = 1;

  std::int64_t duration_ns() const {
    std::int64_t d = 0;
    for (const auto& i : instructions) d += i.duration_ns;
    return d;
  }
  bool operator==(const ProgramBlock&) const = default;
};

/// Loop-compressed program: each block runs `repeat` times, the block list
/// runs `repetitions` times.
struct PulseProgram {
  std::vector<std::string> channels{"laser", "mw_switch", "sync", "spare"};
  std::vector<ProgramBlock> blocks;
  std::int64_t repetitions = 1;

  std::size_t instruction_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.instructions.size();
    return n;
  }
  std::int64_t pass_duration_ns() const {
    std::int64_t d = 0;
    for (const auto& b : blocks) d += b.duration_ns() * b.repeat;
    return d;
  }
  std::int64_t total_duration_ns() const { return pass_duration_ns() * repetitions; }
  bool operator==(const PulseProgram&) const = default;
};

struct PulseGenConstraints {
  std::int64_t min_pulse_ns = 2;
  std::size_t max_instructions = 4096;
};

// ---------------------------------------------------------------------------
// Laser

struct LaserModel {
  double set_power = 1e-3;          // W
  double rate_per_watt = 5e9;       // optical excitation rate per centre per W
  double overshoot_amplitude = 0.0; // fraction
  double overshoot_decay = 100e-9;  // s
  double thermal_memory = 1e-4;     // s
  double rin_sigma = 0.0;           // relative std of the slow drift factor
  double rin_correlation = 1.0;     // s
  double drift_linear = 0.0;        // fractional change per second

  void validate() const {
    if (!(set_power >= 0.0)) fail(errc::config, "laser set_power must be >= 0");
    if (!(rate_per_watt > 0.0)) fail(errc::config, "laser rate_per_watt must be > 0");
    if (!(overshoot_amplitude >= 0.0)) fail(errc::config, "overshoot_amplitude must be >= 0");
    if (!(overshoot_decay > 0.0) || !(thermal_memory > 0.0)) fail(errc::config, "overshoot time constants must be > 0");
    if (!(rin_sigma >= 0.0) || !(rin_correlation > 0.0)) fail(errc::config, "drift parameters invalid");
  }

  double excitation_rate() const { return set_power * rate_per_watt; }

  /// Gain at time `t` into a pulse that followed `off_before` seconds dark.
  double overshoot(double off_before, double t) const {
    if (overshoot_amplitude == 0.0) return 1.0;
    const double mem = std::isinf(off_before) ? 1.0 : 1.0 - std::exp(-off_before / thermal_memory);
    return 1.0 + overshoot_amplitude * mem * std::exp(-t / overshoot_decay);
  }
};

/// Slow multiplicative drift: Ornstein-Uhlenbeck factor plus a linear ramp,
/// evaluated at non-decreasing times with exact OU transitions.
class LaserDrift {
public:
  LaserDrift(const LaserModel& m, Rng rng) : m_(m), rng_(rng) {
    if (m_.rin_sigma > 0.0) x_ = m_.rin_sigma * normal();
  }

  double at(double t) {
    if (m_.rin_sigma > 0.0 && t > t_) {
      const double a = std::exp(-(t - t_) / m_.rin_correlation);
      x_ = x_ * a + m_.rin_sigma * std::sqrt(std::max(0.0, 1.0 - a * a)) * normal();
    }
    t_ = std::max(t_, t);
    return std::max(0.0, (1.0 + x_) * (1.0 + m_.drift_linear * t));
  }

private:
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }

  LaserModel m_;
  Rng rng_;
  double x_ = 0.0;
  double t_ = 0.0;
};

struct PowerTrace {
  double t0 = 0.0;
  double dt = 0.0;
  std::vector<double> power;  // W
};

/// Optical power for a sampled binary command. `off_before` is the dark time
/// preceding the waveform (infinite: long idle).
inline PowerTrace laser_emit(const std::vector<std::uint8_t>& command, double dt, const LaserModel& model,
                             std::uint64_t seed, double off_before = std::numeric_limits<double>::infinity()) {
  if (!(dt > 0.0)) fail(errc::argument, "laser_emit: dt must be > 0");
  for (auto c : command)
    if (c > 1) fail(errc::argument, "laser_emit: command must be binary");
  PowerTrace out;
  out.dt = dt;
  out.power.resize(command.size());
  LaserDrift drift(model, Rng(seed).split("laser_drift"));
  double off = off_before;  // dark time accumulated so far
  double pulse_off = off_before;
  double on_since = 0.0;
  bool prev_on = false;
  for (std::size_t i = 0; i < command.size(); ++i) {
    const double t = static_cast<double>(i) * dt;
    const bool on = command[i] != 0;
    if (on) {
      if (!prev_on) {
        on_since = t;
        pulse_off = off;
      }
      out.power[i] = model.set_power * model.overshoot(pulse_off, t - on_since) * drift.at(t);
    } else {
      if (prev_on) off = 0.0;
      off += dt;
      out.power[i] = 0.0;
    }
    prev_on = on;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detectors

enum class DetectorKind { analog_pd, digital_pc };

inline const char* to_string(DetectorKind k) { return k == DetectorKind::analog_pd ? "analog_pd" : "digital_pc"; }

struct DetectorConfig {
  DetectorKind kind = DetectorKind::analog_pd;
  // analog
  double bandwidth = 10e6;        // Hz
  double noise_density = 2e-9;    // V/sqrt(Hz)
  double responsivity = 1e-7;     // V per (count/s)
  // digital
  double quantum_efficiency = 0.7;
  double dark_rate = 100.0;       // counts/s
  double dead_time = 22e-9;       // s
  double saturation_rate = 30e6;  // counts/s

  void validate() const {
    if (!(bandwidth > 0.0) || !(noise_density >= 0.0) || !(responsivity > 0.0))
      fail(errc::config, "analog detector needs bandwidth > 0, noise_density >= 0, responsivity > 0");
    if (!(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0)) fail(errc::config, "quantum_efficiency must be in (0,1]");
    if (!(dark_rate >= 0.0) || !(dead_time >= 0.0) || !(saturation_rate > 0.0))
      fail(errc::config, "digital detector needs dark_rate >= 0, dead_time >= 0, saturation_rate > 0");
  }

  /// Minimum spacing between registered events (dead time or saturation cap).
  double hold_off() const { return std::max(dead_time, std::isinf(saturation_rate) ? 0.0 : 1.0 / saturation_rate); }

  /// RMS of the band-limited white noise (one-pole equivalent noise bandwidth pi*B/2).
  double noise_rms() const { return noise_density * std::sqrt(std::numbers::pi * bandwidth / 2.0); }
};

/// Photon rate at the detector, uniformly sampled.
struct RateTrace {
  double t0 = 0.0;
  double dt = 0.0;
  std::vector<double> rate;  // photons/s

  double duration() const { return dt * static_cast<double>(rate.size()); }
};

struct AnalogTrace {
  double t0 = 0.0;
  double dt = 0.0;
  std::vector<double> volts;
};

struct PhotonEvents {
  double t0 = 0.0;
  double t1 = 0.0;
  std::vector<double> times;  // sorted, absolute seconds
};

/// One-pole low-pass filter state, reusable across consecutive traces.
struct LowPass {
  double y = 0.0;
  bool primed = false;

  void run(std::vector<double>& x, double dt, double bandwidth) {
    const double a = 1.0 - std::exp(-2.0 * std::numbers::pi * bandwidth * dt);
    for (double& v : x) {
      if (!primed) {
        y = v;
        primed = true;
      } else {
        y += a * (v - y);
      }
      v = y;
    }
  }
};

inline AnalogTrace detect_analog(const RateTrace& in, const DetectorConfig& cfg, Rng rng, LowPass* state = nullptr) {
  if (!(in.dt > 0.0)) fail(errc::argument, "detect: dt must be > 0");
  if (in.dt > 1.0 / (10.0 * cfg.bandwidth) * (1.0 + 1e-9))
    fail(errc::sampling, "analog detection needs the input sampled finer than 1/(10*bandwidth)");
  AnalogTrace out{in.t0, in.dt, in.rate};
  for (double& v : out.volts) v *= cfg.responsivity;
  LowPass local;
  (state ? *state : local).run(out.volts, in.dt, cfg.bandwidth);
  const double sigma = cfg.noise_rms();
  if (sigma > 0.0) {
    std::normal_distribution<double> n(0.0, sigma);
    for (double& v : out.volts) v += n(rng);
  }
  return out;
}

/// Apply non-paralyzable dead time (and the saturation cap) to sorted times.
/// `last` carries the previous accepted event across calls.
inline void apply_dead_time(std::vector<double>& times, double hold_off, double* last = nullptr) {
  if (hold_off <= 0.0) {
    if (last && !times.empty()) *last = times.back();
    return;
  }
  double prev = last ? *last : -std::numeric_limits<double>::infinity();
  std::size_t w = 0;
  for (double t : times) {
    if (t - prev >= hold_off) {
      times[w++] = t;
      prev = t;
    }
  }
  times.resize(w);
  if (last) *last = prev;
}

/// Poisson photon events for the rate trace: thinning by QE, dark counts,
/// dead time. Event times are uniform within each input sample.
inline PhotonEvents detect_digital(const RateTrace& in, const DetectorConfig& cfg, Rng rng, double* last_event = nullptr) {
  if (!(in.dt > 0.0)) fail(errc::argument, "detect: dt must be > 0");
  PhotonEvents out;
  out.t0 = in.t0;
  out.t1 = in.t0 + in.duration();
  for (std::size_t i = 0; i < in.rate.size(); ++i) {
    const double mean = std::max(0.0, in.rate[i]) * cfg.quantum_efficiency * in.dt;
    if (mean <= 0.0) continue;
    const auto k = std::poisson_distribution<long>(mean)(rng);
    for (long j = 0; j < k; ++j) out.times.push_back(in.t0 + (static_cast<double>(i) + rng.uniform()) * in.dt);
  }
  if (cfg.dark_rate > 0.0) {
    const auto k = std::poisson_distribution<long>(cfg.dark_rate * in.duration())(rng);
    for (long j = 0; j < k; ++j) out.times.push_back(in.t0 + rng.uniform() * in.duration());
  }
  std::sort(out.times.begin(), out.times.end());
  apply_dead_time(out.times, cfg.hold_off(), last_event);
  return out;
}

/// Expected registered rate of a non-paralyzable counter.
inline double registered_rate(double incident, const DetectorConfig& cfg) {
  const double r = incident * cfg.quantum_efficiency + cfg.dark_rate;
  const double h = cfg.hold_off();
  return r / (1.0 + r * h);
}

// ---------------------------------------------------------------------------
// DAQ

enum class DaqMode { analog, binned_counts, time_tag };

inline const char* to_string(DaqMode m) {
  switch (m) {
    case DaqMode::analog: return "analog";
    case DaqMode::binned_counts: return "binned_counts";
    case DaqMode::time_tag: return "time_tag";
  }
  return "?";
}

struct DaqConfig {
  double adc_period = 10e-9;      // s per channel conversion
  double counter_clock = 100e6;   // Hz
  int n_analog_channels = 1;
  std::size_t buffer_capacity = std::size_t{1} << 26;

  void validate() const {
    if (!(adc_period > 0.0) || !(counter_clock > 0.0)) fail(errc::config, "DAQ periods must be > 0");
    if (n_analog_channels < 1) fail(errc::config, "DAQ needs at least one analog channel");
    if (buffer_capacity < 1) fail(errc::config, "DAQ buffer_capacity must be >= 1");
  }

  double analog_period() const { return static_cast<double>(n_analog_channels) * adc_period; }
  double tag_resolution() const { return 1.0 / (2.0 * counter_clock); }
};

struct RawSamples {
  DaqMode mode = DaqMode::analog;
  double t0 = 0.0;
  double period = 0.0;          // sample period, bin width or tag resolution
  std::vector<double> values;   // analog volts or counts per bin
  std::vector<std::int64_t> tags;  // time tags in units of `period`
};

inline void check_capacity(std::size_t n, const DaqConfig& cfg) {
  if (n > cfg.buffer_capacity)
    fail(errc::buffer_overrun, "DAQ buffer overrun at sample index " + std::to_string(cfg.buffer_capacity));
}

/// Sample-and-hold of the analog trace on the n_channels*adc_period grid,
/// starting at `t_start` (the trigger).
inline RawSamples daq_sample_analog(const AnalogTrace& in, const DaqConfig& cfg, double t_start, std::size_t n) {
  check_capacity(n, cfg);
  RawSamples out;
  out.mode = DaqMode::analog;
  out.t0 = t_start;
  out.period = cfg.analog_period();
  out.values.resize(n);
  if (in.volts.empty()) fail(errc::argument, "daq: empty analog trace");
  for (std::size_t k = 0; k < n; ++k) {
    const double t = t_start + static_cast<double>(k) * out.period;
    auto idx = static_cast<std::int64_t>(std::floor((t - in.t0) / in.dt + 1e-9));
    idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(in.volts.size()) - 1);
    out.values[k] = in.volts[static_cast<std::size_t>(idx)];
  }
  return out;
}

/// Counts per bin of `bin` seconds (the counter reset period) from t_start.
inline RawSamples daq_bin_counts(const PhotonEvents& ev, const DaqConfig& cfg, double t_start, double bin, std::size_t n) {
  if (!(bin > 0.0)) fail(errc::argument, "daq: bin width must be > 0");
  check_capacity(n, cfg);
  RawSamples out;
  out.mode = DaqMode::binned_counts;
  out.t0 = t_start;
  out.period = bin;
  out.values.assign(n, 0.0);
  for (double t : ev.times) {
    const double k = std::floor((t - t_start) / bin);
    if (k >= 0.0 && k < static_cast<double>(n)) out.values[static_cast<std::size_t>(k)] += 1.0;
  }
  return out;
}

/// Floor an absolute time to the tag grid (1/(2*clock)).
inline std::int64_t time_tag(double t, const DaqConfig& cfg) {
  return static_cast<std::int64_t>(std::floor(t / cfg.tag_resolution() + 1e-9));
}

inline RawSamples daq_time_tag(const PhotonEvents& ev, const DaqConfig& cfg) {
  check_capacity(ev.times.size(), cfg);
  RawSamples out;
  out.mode = DaqMode::time_tag;
  out.t0 = 0.0;
  out.period = cfg.tag_resolution();
  out.tags.reserve(ev.times.size());
  for (double t : ev.times) out.tags.push_back(time_tag(t, cfg));
  return out;
}

/// Detector/DAQ pairing rule: an analog photodiode cannot feed time tagging,
/// and a counter cannot be sampled as a voltage.
inline void check_pairing(DetectorKind det, DaqMode mode) {
  if (det == DetectorKind::analog_pd && mode != DaqMode::analog)
    fail(errc::config, std::string("analog detector cannot feed DAQ mode ") + to_string(mode));
  if (det == DetectorKind::digital_pc && mode == DaqMode::analog)
    fail(errc::config, "digital photon counter needs binned_counts or time_tag DAQ mode");
}

// ---------------------------------------------------------------------------
// Confocal sample and scanner

struct Emitter {
  Vec3 position;  // um
  double n_centers = 1e4;
};

struct VirtualSample {
  std::vector<Emitter> emitters;
  Vec3 drift;                       // um/s
  double background_rate = 0.0;     // counts/s at the detector
  Vec3 range_min{0.0, 0.0, 0.0};    // scanner travel, um
  Vec3 range_max{100.0, 100.0, 50.0};

  bool in_range(const Vec3& p) const {
    return p.x >= range_min.x && p.x <= range_max.x && p.y >= range_min.y && p.y <= range_max.y &&
           p.z >= range_min.z && p.z <= range_max.z;
  }

  void validate() const {
    for (const auto& e : emitters)
      if (!in_range(e.position)) fail(errc::range, "emitter outside scanner range");
  }

  std::string dummy_info() const {
    std::ostringstream os;
    os << "virtual sample: " << emitters.size() << " emitter(s), drift=(" << drift.x << ", " << drift.y << ", "
       << drift.z << ") um/s";
    return os.str();
  }
};

inline constexpr double kFwhmToSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)

/// Detected rate with the focus at `focus` (um). PSF: separable Gaussian with
/// FWHM r_min laterally and z_min axially. `per_centre` is r_sat * eta_setup.
inline double confocal_rate(const VirtualSample& sample, const Vec3& focus, const optics::OpticsReport& optics,
                            double t, double per_centre) {
  if (!sample.in_range(focus)) fail(errc::range, "focus outside scanner range");
  const double sl = optics.r_min.in_um() / kFwhmToSigma;
  const double sz = optics.z_min.in_um() / kFwhmToSigma;
  double rate = sample.background_rate;
  for (const auto& e : sample.emitters) {
    const Vec3 d = focus - (e.position + sample.drift * t);
    const double g = std::exp(-(d.x * d.x + d.y * d.y) / (2.0 * sl * sl) - d.z * d.z / (2.0 * sz * sz));
    rate += e.n_centers * per_centre * g;
  }
  return rate;
}

struct ScanAxis {
  double min = 0.0;  // um
  double max = 0.0;
  int n = 1;

  double at(int i) const { return n == 1 ? min : min + (max - min) * i / (n - 1); }
};

struct ScanPlan {
  ScanAxis x, y, z;
  double f_sync = 1e3;  // pixels per second

  std::size_t pixels() const { return static_cast<std::size_t>(x.n) * y.n * z.n; }
};

struct ScannerConfig {
  Vec3 range_min{0.0, 0.0, 0.0};
  Vec3 range_max{100.0, 100.0, 50.0};
  double v_min = 0.0;
  double v_max = 10.0;

  double volts(double pos, double lo, double hi) const { return v_min + (pos - lo) / (hi - lo) * (v_max - v_min); }

  std::string dummy_info() const {
    std::ostringstream os;
    os << "virtual scanner: travel (" << range_max.x - range_min.x << " x " << range_max.y - range_min.y << " x "
       << range_max.z - range_min.z << ") um, " << v_min << ".." << v_max << " V";
    return os.str();
  }
};

struct ScanWaveforms {
  std::vector<double> vx, vy, vz;  // one step per sync period
  std::vector<double> sync_edges;  // s
  std::vector<Vec3> positions;     // um
};

/// Three step-ramp voltage sequences, x fastest, one sync period per pixel.
inline ScanWaveforms scanner_waveforms(const ScanPlan& plan, const ScannerConfig& sc) {
  if (plan.x.n < 1 || plan.y.n < 1 || plan.z.n < 1) fail(errc::argument, "scan needs >= 1 pixel per axis");
  if (!(plan.f_sync > 0.0)) fail(errc::argument, "scan f_sync must be > 0");
  auto check = [](const ScanAxis& a, double lo, double hi, const char* name) {
    if (a.min < lo || a.max > hi || a.max < a.min)
      fail(errc::range, std::string("scan range exceeded on axis ") + name);
  };
  check(plan.x, sc.range_min.x, sc.range_max.x, "x");
  check(plan.y, sc.range_min.y, sc.range_max.y, "y");
  check(plan.z, sc.range_min.z, sc.range_max.z, "z");
  ScanWaveforms w;
  const std::size_t n = plan.pixels();
  w.positions.reserve(n);
  for (int k = 0; k < plan.z.n; ++k)
    for (int j = 0; j < plan.y.n; ++j)
      for (int i = 0; i < plan.x.n; ++i) {
        const Vec3 p{plan.x.at(i), plan.y.at(j), plan.z.at(k)};
        w.positions.push_back(p);
        w.vx.push_back(sc.volts(p.x, sc.range_min.x, sc.range_max.x));
        w.vy.push_back(sc.volts(p.y, sc.range_min.y, sc.range_max.y));
        w.vz.push_back(sc.volts(p.z, sc.range_min.z, sc.range_max.z));
        w.sync_edges.push_back(static_cast<double>(w.sync_edges.size()) / plan.f_sync);
      }
  return w;
}

inline std::string dummy_info(const DetectorConfig& d) {
  std::ostringstream os;
  if (d.kind == DetectorKind::analog_pd)
    os << "virtual analog photodiode: bandwidth=" << d.bandwidth << " Hz noise=" << d.noise_density << " V/rtHz";
  else
    os << "virtual photon counter: QE=" << d.quantum_efficiency << " dark=" << d.dark_rate
       << " /s dead_time=" << d.dead_time << " s saturation=" << d.saturation_rate << " /s";
  return os.str();
}

inline std::string dummy_info(const DaqConfig& d) {
  std::ostringstream os;
  os << "virtual DAQ: adc_period=" << d.adc_period << " s x " << d.n_analog_channels
     << " ch, counter_clock=" << d.counter_clock << " Hz (tag resolution " << d.tag_resolution() << " s)";
  return os.str();
}

inline std::string dummy_info(const LaserModel& l) {
  std::ostringstream os;
  os << "virtual laser: power=" << l.set_power << " W overshoot=" << l.overshoot_amplitude << " decay="
     << l.overshoot_decay << " s memory=" << l.thermal_memory << " s";
  return os.str();
}

inline std::string dummy_info(const PulseGenConstraints& c) {
  std::ostringstream os;
  os << "virtual pulse generator: 4 channels, 1 ns grid, min pulse " << c.min_pulse_ns << " ns, max "
     << c.max_instructions << " instructions";
  return os.str();
}

}  // namespace virtlab::instruments
