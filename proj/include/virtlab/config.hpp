#pragma once

// Lab configuration: one YAML document describing the instruments, the
// spin model, how detectors and DAQ modes are wired to experiment families,
// engine defaults and per-protocol parameters. Unknown keys are rejected.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "virtlab/error.hpp"
#include "virtlab/instruments.hpp"
#include "virtlab/optics.hpp"
#include "virtlab/sequence.hpp"
#include "virtlab/spin_model.hpp"

namespace virtlab::config {

using instruments::DaqMode;
using instruments::DetectorConfig;
using instruments::DetectorKind;

enum class SweepOrder { up, down, random };

inline const char* to_string(SweepOrder o) {
  switch (o) {
    case SweepOrder::up: return "up";
    case SweepOrder::down: return "down";
    case SweepOrder::random: return "random";
  }
  return "?";
}

inline SweepOrder sweep_order_from_string(const std::string& s) {
  if (s == "up") return SweepOrder::up;
  if (s == "down") return SweepOrder::down;
  if (s == "random") return SweepOrder::random;
  fail(errc::config, "unknown sweep order '" + s + "' (up|down|random)");
}

inline DaqMode daq_mode_from_string(const std::string& s) {
  if (s == "analog") return DaqMode::analog;
  if (s == "binned_counts") return DaqMode::binned_counts;
  if (s == "time_tag") return DaqMode::time_tag;
  fail(errc::config, "unknown DAQ mode '" + s + "' (analog|binned_counts|time_tag)");
}

inline DetectorKind detector_kind_from_string(const std::string& s) {
  if (s == "analog_pd") return DetectorKind::analog_pd;
  if (s == "digital_pc") return DetectorKind::digital_pc;
  fail(errc::config, "unknown detector kind '" + s + "' (analog_pd|digital_pc)");
}

/// Which detector and DAQ mode feed an experiment family.
struct Wiring {
  std::string detector;
  DaqMode daq_mode = DaqMode::analog;
};

struct EngineDefaults {
  sequence::Averaging averaging = sequence::Averaging::pn;
  sequence::SyncMethod sync = sequence::SyncMethod::method2;
  std::int64_t n_repeats = 20;
  SweepOrder sweep_order = SweepOrder::up;
  double sim_dt = 1e-9;            // s, simulation grid of the optical chain
  int ensemble_size = 400;         // detuning classes of the addressed line
  bool realtime = false;           // pace simulated time to the wall clock
  std::size_t partial_buffer = 256;
  bool blind = false;              // method1: locate pulses by extraction only
  double window_guard = 100e-9;    // s recorded past each readout pulse
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8765;        // framed JSON stream
  int http_port = 8766;   // one-shot POST /command and static assets
  std::string static_dir = "ui/dist";
  double heartbeat = 2.0;
  std::size_t subscriber_queue = 64;
};

/// Declared protocol parameter (numbers and words share one text slot).
struct ParamSpec {
  std::string name;
  std::string value;  // default, as text
  std::string doc;
};

inline const std::vector<std::string>& protocol_kinds() {
  static const std::vector<std::string> k{"confocal_map", "cw_odmr", "rabi", "t1", "ramsey", "hahn_echo", "pi_calibration"};
  return k;
}

namespace detail {
inline std::vector<ParamSpec> pulsed_common() {
  return {
      {"n_repeats", "", "repetitions N (empty: engine default)"},
      {"averaging", "", "np|pn (empty: engine default)"},
      {"sync", "", "method1|method2 (empty: engine default)"},
      {"mw_power_dbm", "", "MW power (empty: source default)"},
      {"detuning", "0", "MW frequency minus line centre, Hz"},
      {"readout_len", "3e-6", "readout laser pulse, s"},
      {"laser_pulse_len", "3e-6", "leading polarization pulse, s"},
      {"init_wait", "1e-6", "wait after a laser pulse before MW, s"},
      {"mw_readout_wait", "100e-9", "last MW pulse to readout, s"},
      {"series_idle", "10e-6", "idle between series, s"},
      {"signal_start", "0", "signal window start after the rise, s"},
      {"signal_stop", "300e-9", "signal window stop after the rise, s"},
      {"reference_start", "2e-6", "reference window start after the rise, s"},
      {"reference_stop", "2.9e-6", "reference window stop after the rise, s"},
      {"constant_period", "0", "pad laser-to-laser gaps to the longest one (0|1)"},
  };
}
}  // namespace detail

/// Parameters each protocol understands, with defaults.
inline const std::map<std::string, std::vector<ParamSpec>>& protocol_params() {
  static const auto table = [] {
    std::map<std::string, std::vector<ParamSpec>> t;
    t["confocal_map"] = {
        {"x_min", "20", "um"}, {"x_max", "30", "um"}, {"y_min", "20", "um"}, {"y_max", "30", "um"},
        {"z", "10", "um"},     {"nx", "41", "pixels"}, {"ny", "41", "pixels"}, {"f_sync", "1000", "pixels per second"},
    };
    t["cw_odmr"] = {
        {"f_start", "2.80e9", "Hz"},
        {"f_stop", "2.94e9", "Hz"},
        {"f_step", "0.2e6", "Hz"},
        {"dwell", "10e-3", "s per point"},
        {"sweeps", "4", "full sweeps"},
        {"order", "", "up|down|random (empty: engine default)"},
        {"mw_power_dbm", "", "MW power (empty: source default)"},
        {"laser_power", "", "W (empty: laser default)"},
        {"max_dips", "12", "upper bound on fitted dips"},
    };
    auto pulsed = [](std::vector<ParamSpec> own) {
      for (auto& c : detail::pulsed_common())
        if (std::none_of(own.begin(), own.end(), [&](const ParamSpec& o) { return o.name == c.name; })) own.push_back(c);
      return own;
    };
    t["rabi"] = pulsed({{"tau_start", "0", "s"}, {"tau_stop", "500e-9", "s"}, {"points", "51", ""}, {"edge_time", "", "MW edge time, s (empty: config)"}});
    t["t1"] = pulsed({{"tau_min", "10e-6", "s"}, {"tau_max", "12e-3", "s"}, {"points", "16", "geometric"}, {"pi_len", "", "s (empty: from prerequisite)"}});
    t["ramsey"] = pulsed({{"tau_start", "20e-9", "s"}, {"tau_stop", "3e-6", "s"}, {"points", "150", ""}, {"pi_len", "", "s (empty: from prerequisite)"}, {"detuning", "2e6", "MW frequency minus line centre, Hz"}});
    t["hahn_echo"] = pulsed({{"tau_min", "1e-6", "s"}, {"tau_max", "120e-6", "s"}, {"points", "30", ""}, {"pi_len", "", "s (empty: from prerequisite)"}, {"stretched", "0", "free stretch exponent (0|1)"}});
    t["pi_calibration"] = pulsed({{"tau_start", "60e-9", "s"}, {"tau_stop", "140e-9", "s"}, {"tau_step", "5e-9", "s"}, {"echo_delay", "500e-9", "s"}, {"edge_time", "", "MW edge time, s (empty: config)"}, {"rabi_pi", "", "Rabi-fit pi for comparison, s"}});
    // The n_repeats default of hahn/t1 follows the engine default as well.
    return t;
  }();
  return table;
}

struct LabConfig {
  std::uint64_t seed = 1;
  spin::NVEnsembleParams spin;
  Vec3 bias_field{0.0, 0.0, 0.0};  // T
  int target_line = 0;             // index into resonance_frequencies
  optics::ObjectiveSpec objective;
  optics::ConfocalGeometry geometry;
  double collection = 0.01;        // emitted photons reaching the detector
  instruments::MwSourceConfig mw;
  double mw_edge_time = 0.0;       // s, MW switch rise/fall (0: square)
  instruments::LaserModel laser;
  instruments::PulseGenConstraints pulse_gen;
  std::map<std::string, DetectorConfig> detectors = default_detectors();
  instruments::DaqConfig daq;
  instruments::ScannerConfig scanner;
  instruments::VirtualSample sample = default_sample();
  std::map<std::string, Wiring> wiring = default_wiring();
  EngineDefaults engine;
  ServiceConfig service;
  std::map<std::string, std::map<std::string, std::string>> protocols;

  static std::map<std::string, DetectorConfig> default_detectors() {
    DetectorConfig apd;
    apd.kind = DetectorKind::analog_pd;
    DetectorConfig spc;
    spc.kind = DetectorKind::digital_pc;
    return {{"apd", apd}, {"spc", spc}};
  }
  static std::map<std::string, Wiring> default_wiring() {
    return {{"pulsed", {"apd", DaqMode::analog}}, {"cw", {"spc", DaqMode::binned_counts}}, {"scan", {"spc", DaqMode::binned_counts}}};
  }
  static instruments::VirtualSample default_sample() {
    instruments::VirtualSample s;
    s.emitters.push_back({{25.0, 25.0, 10.0}, 1e4});
    s.background_rate = 2e3;
    return s;
  }

  /// Detector + DAQ mode wired to an experiment family.
  std::pair<const DetectorConfig&, DaqMode> route(const std::string& family) const {
    const auto w = wiring.find(family);
    if (w == wiring.end()) fail(errc::config, "no wiring entry for '" + family + "'");
    const auto d = detectors.find(w->second.detector);
    if (d == detectors.end())
      fail(errc::config, "wiring '" + family + "' references unknown detector '" + w->second.detector + "'");
    return {d->second, w->second.daq_mode};
  }

  /// Parameter value for a protocol: config override, else declared default.
  std::string param(const std::string& kind, const std::string& name) const {
    const auto spec = protocol_params().find(kind);
    if (spec == protocol_params().end()) fail(errc::config, "unknown protocol '" + kind + "'");
    if (auto p = protocols.find(kind); p != protocols.end())
      if (auto v = p->second.find(name); v != p->second.end()) return v->second;
    for (const auto& s : spec->second)
      if (s.name == name) return s.value;
    fail(errc::config, "protocol '" + kind + "' has no parameter '" + name + "'");
  }

  void validate() const {
    auto ctx = [](const std::string& where, auto&& fn) {
      try {
        fn();
      } catch (const Error& e) {
        fail(errc::config, where + ": " + e.what());
      }
    };
    ctx("spin", [&] { spin.validate(); });
    ctx("bias_field", [&] { spin::check_secular(spin, spin::BiasField{bias_field}); });
    ctx("target_line", [&] {
      const auto n = spin::resonance_frequencies(spin, spin::BiasField{bias_field}).size();
      if (target_line < 0 || static_cast<std::size_t>(target_line) >= n)
        fail(errc::config, "target_line " + std::to_string(target_line) + " outside the " + std::to_string(n) + " resonance lines");
    });
    ctx("optics", [&] {
      objective.validate();
      geometry.validate();
    });
    if (!(collection > 0.0 && collection <= 1.0)) fail(errc::config, "optics.collection must be in (0, 1]");
    ctx("instruments.mw_source", [&] {
      if (!(mw.min_dwell > 0.0)) fail(errc::config, "min_dwell must be > 0");
      if (!(mw.rabi_at_ref >= 0.0)) fail(errc::config, "rabi_at_ref must be >= 0");
      if (mw.power_dbm > mw.max_power_dbm) fail(errc::config, "power_dbm exceeds max_power_dbm");
    });
    if (!(mw_edge_time >= 0.0)) fail(errc::config, "instruments.mw_source.edge_time must be >= 0");
    ctx("instruments.laser", [&] { laser.validate(); });
    if (pulse_gen.min_pulse_ns < 1 || pulse_gen.max_instructions < 1)
      fail(errc::config, "instruments.pulse_generator: min_pulse_ns and max_instructions must be >= 1");
    if (detectors.empty()) fail(errc::config, "instruments.detectors: at least one detector is required");
    for (const auto& [name, d] : detectors) ctx("instruments.detectors." + name, [&] { d.validate(); });
    ctx("instruments.daq", [&] { daq.validate(); });
    if (!(scanner.v_max > scanner.v_min)) fail(errc::config, "instruments.scanner: v_max must exceed v_min");
    ctx("sample", [&] { sample.validate(); });
    for (const auto& [family, w] : wiring) {
      if (family != "pulsed" && family != "cw" && family != "scan")
        fail(errc::config, "wiring: unknown experiment family '" + family + "' (pulsed|cw|scan)");
      const auto d = detectors.find(w.detector);
      if (d == detectors.end()) fail(errc::config, "wiring '" + family + "' references unknown detector '" + w.detector + "'");
      ctx("wiring." + family, [&] { instruments::check_pairing(d->second.kind, w.daq_mode); });
    }
    for (const char* family : {"pulsed", "cw", "scan"})
      if (!wiring.count(family)) fail(errc::config, std::string("wiring: missing entry for '") + family + "'");
    if (engine.n_repeats < 1) fail(errc::config, "engine.n_repeats must be >= 1");
    if (!(engine.sim_dt > 0.0 && engine.sim_dt <= 10e-9)) fail(errc::config, "engine.sim_dt must be in (0, 10 ns]");
    if (engine.ensemble_size < 1) fail(errc::config, "engine.ensemble_size must be >= 1");
    if (engine.partial_buffer < 1) fail(errc::config, "engine.partial_buffer must be >= 1");
    if (!(engine.window_guard >= 0.0)) fail(errc::config, "engine.window_guard must be >= 0");
    if (service.port < 0 || service.port > 65535 || service.http_port < 0 || service.http_port > 65535)
      fail(errc::config, "service ports must be in [0, 65535]");
    if (!(service.heartbeat > 0.0)) fail(errc::config, "service.heartbeat must be > 0");
    for (const auto& [kind, params] : protocols) {
      const auto spec = protocol_params().find(kind);
      if (spec == protocol_params().end()) fail(errc::config, "protocols: unknown protocol '" + kind + "'");
      for (const auto& [name, value] : params) {
        bool known = false;
        for (const auto& s : spec->second) known = known || s.name == name;
        if (!known) fail(errc::config, "protocols." + kind + ": unknown parameter '" + name + "'");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// YAML reading

namespace detail {

inline std::string where(const YAML::Node& n) {
  const auto m = n.Mark();
  if (m.is_null()) return "";
  return " at line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1);
}

/// Strict view of one mapping: every key must be consumed.
class MapReader {
public:
  MapReader(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) fail(errc::config, path_ + " must be a mapping" + where(node_));
  }

  bool has(const char* key) {
    if (!node_ || node_.IsNull()) return false;
    used_.push_back(key);
    return static_cast<bool>(std::as_const(node_)[key]);
  }

  YAML::Node raw(const char* key) {
    used_.push_back(key);
    // const lookup: the mutable operator[] would insert the key
    return (node_ && node_.IsMap()) ? std::as_const(node_)[key] : YAML::Node();
  }

  template <class T>
  void get(const char* key, T& out) {
    YAML::Node n = raw(key);
    if (!n || n.IsNull()) return;
    if (!n.IsScalar()) fail(errc::config, path_ + "." + key + " must be a scalar" + where(n));
    try {
      if constexpr (std::is_same_v<T, bool>) {
        out = n.as<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        const double v = n.as<double>();
        if (v != std::floor(v) || std::abs(v) > 9e15) throw YAML::Exception(n.Mark(), "not an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v < 0) throw YAML::Exception(n.Mark(), "negative");
        }
        out = static_cast<T>(v);
      } else {
        out = n.as<T>();
      }
    } catch (const YAML::Exception&) {
      fail(errc::config, path_ + "." + key + ": invalid value '" + n.Scalar() + "'" + where(n));
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(out)) fail(errc::config, path_ + "." + key + " must be finite" + where(n));
    }
  }

  void get_vec(const char* key, Vec3& out) {
    YAML::Node n = raw(key);
    if (!n || n.IsNull()) return;
    if (!n.IsSequence() || n.size() != 3) fail(errc::config, path_ + "." + key + " must be a list of 3 numbers" + where(n));
    double v[3];
    for (std::size_t i = 0; i < 3; ++i) {
      try {
        v[i] = n[i].as<double>();
      } catch (const YAML::Exception&) {
        fail(errc::config, path_ + "." + key + ": invalid number" + where(n[i]));
      }
      if (!std::isfinite(v[i])) fail(errc::config, path_ + "." + key + " must be finite" + where(n[i]));
    }
    out = Vec3{v[0], v[1], v[2]};
  }

  template <class F>
  void get_enum(const char* key, F parse) {
    std::string s;
    YAML::Node n = raw(key);
    if (!n || n.IsNull()) return;
    get(key, s);
    try {
      parse(s);
    } catch (const Error& e) {
      fail(errc::config, path_ + "." + key + ": " + e.what() + where(n));
    }
  }

  void done() const {
    if (!node_ || node_.IsNull()) return;
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      const auto key = it->first.as<std::string>();
      if (std::find(used_.begin(), used_.end(), key) == used_.end())
        fail(errc::config, "unknown key '" + key + "' in " + path_ + where(it->first));
    }
  }

  const std::string& path() const { return path_; }

private:
  YAML::Node node_;
  std::string path_;
  std::vector<std::string> used_;
};

inline void read_detector(const YAML::Node& n, const std::string& path, DetectorConfig& d) {
  MapReader r(n, path);
  r.get_enum("kind", [&](const std::string& s) { d.kind = detector_kind_from_string(s); });
  r.get("bandwidth", d.bandwidth);
  r.get("noise_density", d.noise_density);
  r.get("responsivity", d.responsivity);
  r.get("quantum_efficiency", d.quantum_efficiency);
  r.get("dark_rate", d.dark_rate);
  r.get("dead_time", d.dead_time);
  r.get("saturation_rate", d.saturation_rate);
  r.done();
}

inline LabConfig read(const YAML::Node& root) {
  LabConfig c;
  MapReader top(root, "config");
  top.get("seed", c.seed);
  top.get("target_line", c.target_line);
  top.get_vec("bias_field", c.bias_field);
  {
    MapReader r(top.raw("spin"), "spin");
    auto& s = c.spin;
    r.get("d_zfs", s.d_zfs);
    r.get("e_strain", s.e_strain);
    r.get("gamma", s.gamma);
    r.get("t1", s.t1);
    r.get("t2", s.t2);
    r.get("t2_star", s.t2_star);
    r.get("readout_contrast", s.readout_contrast);
    r.get("tau_pol", s.tau_pol);
    r.get("reference_laser_rate", s.reference_laser_rate);
    r.get("tau_singlet", s.tau_singlet);
    r.get("shelf_fraction", s.shelf_fraction);
    r.get("r_sat", s.r_sat);
    r.get("n_centers", s.n_centers);
    r.get("thermal_polarization", s.thermal_polarization);
    r.get("cw_repolarization_per_rate", s.cw_repolarization_per_rate);
    r.get("cw_laser_rate_opt", s.cw_laser_rate_opt);
    r.get("secular_guard", s.secular_guard);
    r.done();
  }
  {
    MapReader r(top.raw("optics"), "optics");
    r.get("na", c.objective.na);
    r.get("n_immersion", c.objective.n_immersion);
    r.get("magnification", c.objective.magnification);
    double tube = c.objective.tube_length.in_mm(), fl = c.geometry.focus_lens_focal_length.in_mm();
    double pump = c.geometry.pump_wavelength.in_nm(), pl = c.geometry.pl_wavelength.in_nm();
    r.get("tube_length_mm", tube);
    r.get("focus_lens_mm", fl);
    r.get("pump_wavelength_nm", pump);
    r.get("pl_wavelength_nm", pl);
    r.get("collection", c.collection);
    c.objective.tube_length = Length::mm(tube);
    c.geometry.focus_lens_focal_length = Length::mm(fl);
    c.geometry.pump_wavelength = Length::nm(pump);
    c.geometry.pl_wavelength = Length::nm(pl);
    r.done();
  }
  {
    MapReader inst(top.raw("instruments"), "instruments");
    {
      MapReader r(inst.raw("mw_source"), "instruments.mw_source");
      r.get("min_dwell", c.mw.min_dwell);
      r.get("rabi_at_ref", c.mw.rabi_at_ref);
      r.get("ref_power_dbm", c.mw.ref_power_dbm);
      r.get("power_dbm", c.mw.power_dbm);
      r.get("max_power_dbm", c.mw.max_power_dbm);
      r.get("edge_time", c.mw_edge_time);
      r.done();
    }
    {
      MapReader r(inst.raw("laser"), "instruments.laser");
      auto& l = c.laser;
      r.get("set_power", l.set_power);
      r.get("rate_per_watt", l.rate_per_watt);
      r.get("overshoot_amplitude", l.overshoot_amplitude);
      r.get("overshoot_decay", l.overshoot_decay);
      r.get("thermal_memory", l.thermal_memory);
      r.get("rin_sigma", l.rin_sigma);
      r.get("rin_correlation", l.rin_correlation);
      r.get("drift_linear", l.drift_linear);
      r.done();
    }
    {
      MapReader r(inst.raw("pulse_generator"), "instruments.pulse_generator");
      r.get("min_pulse_ns", c.pulse_gen.min_pulse_ns);
      r.get("max_instructions", c.pulse_gen.max_instructions);
      r.done();
    }
    if (inst.has("detectors")) {
      const YAML::Node dn = inst.raw("detectors");
      if (!dn.IsMap()) fail(errc::config, "instruments.detectors must be a mapping of name -> detector" + where(dn));
      c.detectors.clear();
      for (auto it = dn.begin(); it != dn.end(); ++it) {
        const auto name = it->first.as<std::string>();
        DetectorConfig d;
        read_detector(it->second, "instruments.detectors." + name, d);
        c.detectors[name] = d;
      }
    }
    {
      MapReader r(inst.raw("daq"), "instruments.daq");
      r.get("adc_period", c.daq.adc_period);
      r.get("counter_clock", c.daq.counter_clock);
      r.get("n_analog_channels", c.daq.n_analog_channels);
      r.get("buffer_capacity", c.daq.buffer_capacity);
      r.done();
    }
    {
      MapReader r(inst.raw("scanner"), "instruments.scanner");
      r.get_vec("range_min", c.scanner.range_min);
      r.get_vec("range_max", c.scanner.range_max);
      r.get("v_min", c.scanner.v_min);
      r.get("v_max", c.scanner.v_max);
      r.done();
    }
    inst.done();
  }
  c.sample.range_min = c.scanner.range_min;
  c.sample.range_max = c.scanner.range_max;
  if (top.has("sample")) {
    MapReader r(top.raw("sample"), "sample");
    r.get_vec("drift", c.sample.drift);
    r.get("background_rate", c.sample.background_rate);
    if (r.has("emitters")) {
      const YAML::Node en = r.raw("emitters");
      if (!en.IsSequence()) fail(errc::config, "sample.emitters must be a list" + where(en));
      c.sample.emitters.clear();
      for (std::size_t i = 0; i < en.size(); ++i) {
        MapReader er(en[i], "sample.emitters[" + std::to_string(i) + "]");
        instruments::Emitter e;
        er.get_vec("position", e.position);
        er.get("n_centers", e.n_centers);
        er.done();
        c.sample.emitters.push_back(e);
      }
    }
    r.done();
  }
  if (top.has("wiring")) {
    const YAML::Node wn = top.raw("wiring");
    if (!wn.IsMap()) fail(errc::config, "wiring must be a mapping" + where(wn));
    for (auto it = wn.begin(); it != wn.end(); ++it) {
      const auto family = it->first.as<std::string>();
      MapReader r(it->second, "wiring." + family);
      Wiring w = c.wiring.count(family) ? c.wiring[family] : Wiring{};
      r.get("detector", w.detector);
      r.get_enum("daq_mode", [&](const std::string& s) { w.daq_mode = daq_mode_from_string(s); });
      r.done();
      c.wiring[family] = w;
    }
  }
  {
    MapReader r(top.raw("engine"), "engine");
    auto& e = c.engine;
    r.get_enum("averaging", [&](const std::string& s) { e.averaging = sequence::averaging_from_string(s); });
    r.get_enum("sync", [&](const std::string& s) { e.sync = sequence::sync_from_string(s); });
    r.get("n_repeats", e.n_repeats);
    r.get_enum("sweep_order", [&](const std::string& s) { e.sweep_order = sweep_order_from_string(s); });
    r.get("sim_dt", e.sim_dt);
    r.get("ensemble_size", e.ensemble_size);
    r.get("realtime", e.realtime);
    r.get("partial_buffer", e.partial_buffer);
    r.get("blind", e.blind);
    r.get("window_guard", e.window_guard);
    r.done();
  }
  {
    MapReader r(top.raw("service"), "service");
    auto& s = c.service;
    r.get("host", s.host);
    r.get("port", s.port);
    r.get("http_port", s.http_port);
    r.get("static_dir", s.static_dir);
    r.get("heartbeat", s.heartbeat);
    r.get("subscriber_queue", s.subscriber_queue);
    r.done();
  }
  if (top.has("protocols")) {
    const YAML::Node pn = top.raw("protocols");
    if (!pn.IsMap()) fail(errc::config, "protocols must be a mapping" + where(pn));
    for (auto it = pn.begin(); it != pn.end(); ++it) {
      const auto kind = it->first.as<std::string>();
      const auto spec = protocol_params().find(kind);
      if (spec == protocol_params().end()) fail(errc::config, "unknown protocol '" + kind + "' in protocols" + where(it->first));
      if (!it->second.IsMap()) fail(errc::config, "protocols." + kind + " must be a mapping" + where(it->second));
      for (auto p = it->second.begin(); p != it->second.end(); ++p) {
        const auto name = p->first.as<std::string>();
        bool known = false;
        for (const auto& s : spec->second) known = known || s.name == name;
        if (!known) fail(errc::config, "unknown key '" + name + "' in protocols." + kind + where(p->first));
        if (!p->second.IsScalar()) fail(errc::config, "protocols." + kind + "." + name + " must be a scalar" + where(p->second));
        c.protocols[kind][name] = p->second.Scalar();
      }
    }
  }
  top.done();
  return c;
}

}  // namespace detail

/// Parse and validate a config document. All failures are `config` errors
/// (syntax problems carry line/column).
inline LabConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    fail(errc::config, "parse error at line " + std::to_string(e.mark.line + 1) + ", column " +
                           std::to_string(e.mark.column + 1) + ": " + e.msg);
  } catch (const YAML::Exception& e) {
    fail(errc::config, std::string("parse error: ") + e.what());
  }
  LabConfig c;
  try {
    if (root && !root.IsNull()) {
      if (!root.IsMap()) fail(errc::config, "config root must be a mapping" + detail::where(root));
      c = detail::read(root);
    }
  } catch (const Error&) {
    throw;
  } catch (const YAML::Exception& e) {
    fail(errc::config, std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline LabConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(errc::io, "cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Config file path: explicit flag, else $VIRTLAB_CONFIG, else none.
inline std::optional<std::string> resolve_config_path(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("VIRTLAB_CONFIG"); env && *env) return std::string(env);
  return std::nullopt;
}

inline LabConfig load_or_default(const std::string& flag) {
  const auto path = resolve_config_path(flag);
  return path ? load_config(*path) : LabConfig{};
}

// ---------------------------------------------------------------------------
// Canonical writer (17 significant digits; parse(to_yaml(c)) reproduces c)

inline std::string to_yaml(const LabConfig& c) {
  using sequence::fmt17;
  std::ostringstream o;
  auto v3 = [](const Vec3& v) { return "[" + fmt17(v.x) + ", " + fmt17(v.y) + ", " + fmt17(v.z) + "]"; };
  auto q = [](const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
      if (ch == '"' || ch == '\\') out += '\\';
      out += ch;
    }
    return out + "\"";
  };
  o << "seed: " << c.seed << "\n";
  o << "bias_field: " << v3(c.bias_field) << "\n";
  o << "target_line: " << c.target_line << "\n";
  const auto& s = c.spin;
  o << "spin:\n"
    << "  d_zfs: " << fmt17(s.d_zfs) << "\n  e_strain: " << fmt17(s.e_strain) << "\n  gamma: " << fmt17(s.gamma)
    << "\n  t1: " << fmt17(s.t1) << "\n  t2: " << fmt17(s.t2) << "\n  t2_star: " << fmt17(s.t2_star)
    << "\n  readout_contrast: " << fmt17(s.readout_contrast) << "\n  tau_pol: " << fmt17(s.tau_pol)
    << "\n  reference_laser_rate: " << fmt17(s.reference_laser_rate) << "\n  tau_singlet: " << fmt17(s.tau_singlet)
    << "\n  shelf_fraction: " << fmt17(s.shelf_fraction) << "\n  r_sat: " << fmt17(s.r_sat)
    << "\n  n_centers: " << fmt17(s.n_centers) << "\n  thermal_polarization: " << fmt17(s.thermal_polarization)
    << "\n  cw_repolarization_per_rate: " << fmt17(s.cw_repolarization_per_rate)
    << "\n  cw_laser_rate_opt: " << fmt17(s.cw_laser_rate_opt) << "\n  secular_guard: " << fmt17(s.secular_guard) << "\n";
  o << "optics:\n"
    << "  na: " << fmt17(c.objective.na) << "\n  n_immersion: " << fmt17(c.objective.n_immersion)
    << "\n  magnification: " << fmt17(c.objective.magnification)
    << "\n  tube_length_mm: " << fmt17(c.objective.tube_length.in_mm())
    << "\n  focus_lens_mm: " << fmt17(c.geometry.focus_lens_focal_length.in_mm())
    << "\n  pump_wavelength_nm: " << fmt17(c.geometry.pump_wavelength.in_nm())
    << "\n  pl_wavelength_nm: " << fmt17(c.geometry.pl_wavelength.in_nm()) << "\n  collection: " << fmt17(c.collection)
    << "\n";
  o << "instruments:\n";
  o << "  mw_source:\n    min_dwell: " << fmt17(c.mw.min_dwell) << "\n    rabi_at_ref: " << fmt17(c.mw.rabi_at_ref)
    << "\n    ref_power_dbm: " << fmt17(c.mw.ref_power_dbm) << "\n    power_dbm: " << fmt17(c.mw.power_dbm)
    << "\n    max_power_dbm: " << fmt17(c.mw.max_power_dbm) << "\n    edge_time: " << fmt17(c.mw_edge_time) << "\n";
  const auto& l = c.laser;
  o << "  laser:\n    set_power: " << fmt17(l.set_power) << "\n    rate_per_watt: " << fmt17(l.rate_per_watt)
    << "\n    overshoot_amplitude: " << fmt17(l.overshoot_amplitude) << "\n    overshoot_decay: " << fmt17(l.overshoot_decay)
    << "\n    thermal_memory: " << fmt17(l.thermal_memory) << "\n    rin_sigma: " << fmt17(l.rin_sigma)
    << "\n    rin_correlation: " << fmt17(l.rin_correlation) << "\n    drift_linear: " << fmt17(l.drift_linear) << "\n";
  o << "  pulse_generator:\n    min_pulse_ns: " << c.pulse_gen.min_pulse_ns
    << "\n    max_instructions: " << c.pulse_gen.max_instructions << "\n";
  o << "  detectors:\n";
  for (const auto& [name, d] : c.detectors) {
    o << "    " << q(name) << ":\n      kind: " << instruments::to_string(d.kind) << "\n      bandwidth: " << fmt17(d.bandwidth)
      << "\n      noise_density: " << fmt17(d.noise_density) << "\n      responsivity: " << fmt17(d.responsivity)
      << "\n      quantum_efficiency: " << fmt17(d.quantum_efficiency) << "\n      dark_rate: " << fmt17(d.dark_rate)
      << "\n      dead_time: " << fmt17(d.dead_time) << "\n      saturation_rate: " << fmt17(d.saturation_rate) << "\n";
  }
  o << "  daq:\n    adc_period: " << fmt17(c.daq.adc_period) << "\n    counter_clock: " << fmt17(c.daq.counter_clock)
    << "\n    n_analog_channels: " << c.daq.n_analog_channels << "\n    buffer_capacity: " << c.daq.buffer_capacity << "\n";
  o << "  scanner:\n    range_min: " << v3(c.scanner.range_min) << "\n    range_max: " << v3(c.scanner.range_max)
    << "\n    v_min: " << fmt17(c.scanner.v_min) << "\n    v_max: " << fmt17(c.scanner.v_max) << "\n";
  o << "sample:\n  drift: " << v3(c.sample.drift) << "\n  background_rate: " << fmt17(c.sample.background_rate)
    << "\n  emitters:" << (c.sample.emitters.empty() ? " []\n" : "\n");
  for (const auto& e : c.sample.emitters)
    o << "    - position: " << v3(e.position) << "\n      n_centers: " << fmt17(e.n_centers) << "\n";
  o << "wiring:\n";
  for (const auto& [family, w] : c.wiring)
    o << "  " << family << ":\n    detector: " << q(w.detector) << "\n    daq_mode: " << instruments::to_string(w.daq_mode) << "\n";
  const auto& e = c.engine;
  o << "engine:\n  averaging: " << sequence::to_string(e.averaging) << "\n  sync: " << sequence::to_string(e.sync)
    << "\n  n_repeats: " << e.n_repeats << "\n  sweep_order: " << to_string(e.sweep_order) << "\n  sim_dt: " << fmt17(e.sim_dt)
    << "\n  ensemble_size: " << e.ensemble_size << "\n  realtime: " << (e.realtime ? "true" : "false")
    << "\n  partial_buffer: " << e.partial_buffer << "\n  blind: " << (e.blind ? "true" : "false")
    << "\n  window_guard: " << fmt17(e.window_guard) << "\n";
  const auto& sv = c.service;
  o << "service:\n  host: " << q(sv.host) << "\n  port: " << sv.port << "\n  http_port: " << sv.http_port
    << "\n  static_dir: " << q(sv.static_dir) << "\n  heartbeat: " << fmt17(sv.heartbeat)
    << "\n  subscriber_queue: " << sv.subscriber_queue << "\n";
  if (!c.protocols.empty()) {
    o << "protocols:\n";
    for (const auto& [kind, params] : c.protocols) {
      o << "  " << kind << ":\n";
      for (const auto& [k, v] : params) o << "    " << k << ": " << q(v) << "\n";
    }
  }
  return o.str();
}

}  // namespace virtlab::config
