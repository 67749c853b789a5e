#pragma once

// Experiment recipes: compile the sequence, run it through the engine, fit,
// and return a replayable record. Characterization order: confocal map ->
// CW-ODMR -> Rabi (or pi calibration) -> T1 / Ramsey / Hahn echo.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "virtlab/config.hpp"
#include "virtlab/dsp.hpp"
#include "virtlab/engine.hpp"
#include "virtlab/fit.hpp"
#include "virtlab/record.hpp"
#include "virtlab/sequence.hpp"

namespace virtlab::protocols {

using engine::Lab;
using instruments::DaqMode;
using engine::RunContext;
using record::Column;
using record::Record;
using Overrides = std::map<std::string, std::string>;

/// Prerequisite calibrations gathered by earlier protocol runs.
struct Calibrations {
  std::optional<double> pi_len;  // s
  std::string pi_source;         // protocol (or record) that produced it
};

/// Parameter values of one run: explicit overrides, then config, then defaults.
class Params {
public:
  Params(const config::LabConfig& cfg, const std::string& kind, const Overrides& overrides) : kind_(kind) {
    const auto spec = config::protocol_params().find(kind);
    if (spec == config::protocol_params().end()) fail(errc::argument, "unknown protocol '" + kind + "'");
    for (const auto& [k, v] : overrides) {
      const bool known = std::any_of(spec->second.begin(), spec->second.end(), [&](const config::ParamSpec& s) { return s.name == k; });
      if (!known) fail(errc::config, "protocol '" + kind + "' has no parameter '" + k + "'");
    }
    for (const auto& s : spec->second) {
      const auto o = overrides.find(s.name);
      values_[s.name] = o != overrides.end() ? o->second : cfg.param(kind, s.name);
    }
  }

  bool empty(const std::string& name) const { return raw(name).empty(); }
  const std::string& raw(const std::string& name) const {
    const auto it = values_.find(name);
    if (it == values_.end()) fail(errc::config, "protocol '" + kind_ + "' has no parameter '" + name + "'");
    return it->second;
  }
  double num(const std::string& name) const {
    const auto& s = raw(name);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
      fail(errc::config, kind_ + "." + name + " must be a finite number, got '" + s + "'");
    return v;
  }
  std::optional<double> opt(const std::string& name) const {
    if (empty(name)) return std::nullopt;
    return num(name);
  }
  long integer(const std::string& name) const {
    const double v = num(name);
    if (v != std::floor(v)) fail(errc::config, kind_ + "." + name + " must be an integer");
    return static_cast<long>(v);
  }
  bool flag(const std::string& name) const {
    const auto v = integer(name);
    if (v != 0 && v != 1) fail(errc::config, kind_ + "." + name + " must be 0 or 1");
    return v == 1;
  }
  void set(const std::string& name, std::string value) { values_[name] = std::move(value); }
  const std::map<std::string, std::string>& values() const { return values_; }

private:
  std::string kind_;
  std::map<std::string, std::string> values_;
};

inline std::vector<double> linspace(double a, double b, long n) {
  if (n < 1) fail(errc::config, "sweep needs at least one point");
  std::vector<double> v(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

inline std::vector<double> geomspace(double a, double b, long n) {
  if (!(a > 0.0 && b > 0.0)) fail(errc::config, "geometric sweep needs positive bounds");
  auto v = linspace(std::log(a), std::log(b), n);
  for (auto& x : v) x = std::exp(x);
  return v;
}

inline double snap_ns(double s) { return sequence::seconds(sequence::snap(s)); }

namespace detail {

/// Lab state a replay must restore before re-running.
inline void stamp_lab(const Lab& lab, Record& r) {
  r.params["lab_time"] = record::fmt(lab.clock);
  r.params["focus_x"] = record::fmt(lab.focus.x);
  r.params["focus_y"] = record::fmt(lab.focus.y);
  r.params["focus_z"] = record::fmt(lab.focus.z);
}

inline void apply_power(Lab& lab, const Params& p, const char* mw_key, const char* laser_key, Record& r) {
  if (mw_key) {
    if (auto v = p.opt(mw_key)) lab.mw().set_power(*v);
    r.params[mw_key] = record::fmt(lab.mw().power_dbm());
  }
  if (laser_key) {
    if (auto v = p.opt(laser_key)) {
      auto l = lab.laser();
      l.set_power = *v;
      l.validate();
      lab.laser() = l;
    }
    r.params[laser_key] = record::fmt(lab.laser().set_power);
  } else {
    r.params["laser_power"] = record::fmt(lab.laser().set_power);
  }
}

inline std::optional<dsp::FitResult> try_fit(dsp::Model m, const std::vector<double>& x, const std::vector<double>& y,
                                             dsp::FitOptions opt, Record& r, const std::string& what) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::isfinite(y[i])) {
      xs.push_back(x[i]);
      ys.push_back(y[i]);
    }
  try {
    auto f = dsp::fit(m, xs, ys, opt);
    if (!f.converged) r.warnings.push_back(what + " fit did not converge");
    return f;
  } catch (const Error& e) {
    if (!r.partial) throw;
    r.warnings.push_back(what + " fit skipped on partial data: " + e.what());
    return std::nullopt;
  }
}

struct PulsedRun {
  engine::PulsedResult result;
  std::vector<double> x;
};

inline PulsedRun run_pulsed(Lab& lab, Params& p, sequence::Kind kind, std::vector<double> sweep, sequence::Fixed fixed,
                            sequence::Options options, double edge, RunContext& ctx, Record& r) {
  const auto& cfg = lab.config();
  auto run = engine::run_config(cfg, "pulsed");
  if (!p.empty("n_repeats")) run.n_repeats = p.integer("n_repeats");
  if (!p.empty("averaging")) run.averaging = sequence::averaging_from_string(p.raw("averaging"));
  if (!p.empty("sync")) run.sync = sequence::sync_from_string(p.raw("sync"));
  p.set("n_repeats", std::to_string(run.n_repeats));
  p.set("averaging", sequence::to_string(run.averaging));
  p.set("sync", sequence::to_string(run.sync));
  fixed.readout_len = p.num("readout_len");
  fixed.laser_pulse_len = p.num("laser_pulse_len");
  fixed.init_wait = p.num("init_wait");
  fixed.mw_readout_wait = p.num("mw_readout_wait");
  fixed.series_idle = p.num("series_idle");
  options.constant_period = p.flag("constant_period");
  const auto spec = sequence::build(kind, std::move(sweep), fixed, options);
  const auto seq = sequence::compile(spec, cfg.pulse_gen, run.sync, run.averaging, run.n_repeats);
  engine::PulsedPlan plan;
  plan.windows = {p.num("signal_start"), p.num("signal_stop"), p.num("reference_start"), p.num("reference_stop")};
  plan.detuning = p.num("detuning");
  plan.edge_time = edge;
  apply_power(lab, p, "mw_power_dbm", nullptr, r);
  PulsedRun out;
  out.result = lab.run_pulsed(seq, plan, run, ctx);
  out.x = seq.sweep_values;
  r.partial = out.result.partial;
  for (const auto& l : out.result.log) r.warnings.push_back(l);
  return out;
}

inline void pulsed_columns(Record& r, const std::string& axis, const PulsedRun& pr) {
  r.columns.push_back({axis, "s", pr.x});
  const auto& res = pr.result;
  for (std::size_t v = 0; v < res.signal.size(); ++v) {
    const std::string tag = v == 0 ? "s0" : "s1";
    r.columns.push_back({"signal_" + tag, "", res.signal[v]});
    r.columns.push_back({"stderr_" + tag, "", res.error[v]});
  }
  r.derived["repetitions_completed"] = static_cast<double>(res.completed);
}

inline double pi_or_dependency(const Params& p, const Calibrations& cal, const std::string& kind, Record& r) {
  if (auto v = p.opt("pi_len")) {
    if (!(*v > 0.0)) fail(errc::config, kind + ".pi_len must be > 0");
    r.params["pi_source"] = r.params.count("pi_source") ? r.params["pi_source"] : "parameter";
    return *v;
  }
  if (!cal.pi_len)
    fail(errc::dependency, kind + " needs a pi-pulse calibration: run the rabi (or pi_calibration) protocol first");
  r.params["pi_source"] = cal.pi_source;
  return *cal.pi_len;
}

inline double edge_time(const Lab& lab, const Params& p) {
  if (auto v = p.opt("edge_time")) {
    if (!(*v >= 0.0)) fail(errc::config, "edge_time must be >= 0");
    return *v;
  }
  return lab.config().mw_edge_time;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline Record confocal_map(Lab& lab, Params& p, RunContext& ctx, Record& r) {
  const auto& cfg = lab.config();
  instruments::ScanPlan plan{{p.num("x_min"), p.num("x_max"), static_cast<int>(p.integer("nx"))},
                             {p.num("y_min"), p.num("y_max"), static_cast<int>(p.integer("ny"))},
                             {p.num("z"), p.num("z"), 1},
                             p.num("f_sync")};
  auto run = engine::run_config(cfg, "scan");
  detail::apply_power(lab, p, nullptr, nullptr, r);
  const auto res = lab.run_scan(plan, run, ctx);
  r.partial = res.partial;
  Column t{"t", "s", {}}, x{"x", "um", {}}, y{"y", "um", {}}, z{"z", "um", {}}, v{"counts", run.daq_mode == DaqMode::analog ? "V" : "counts", {}};
  for (std::size_t k = 0; k < res.image.size(); ++k) {
    t.values.push_back(static_cast<double>(k) / plan.f_sync);
    x.values.push_back(res.positions[k].x);
    y.values.push_back(res.positions[k].y);
    z.values.push_back(res.positions[k].z);
    v.values.push_back(res.image[k]);
  }
  r.columns = {t, x, y, z, v};
  const auto best = res.argmax();
  r.derived["peak_x"] = res.positions[best].x;
  r.derived["peak_y"] = res.positions[best].y;
  r.derived["peak_z"] = res.positions[best].z;
  r.derived["peak_counts"] = res.image[best];
  if (!res.partial) lab.focus = res.positions[best];
  return r;
}

inline Record cw_odmr(Lab& lab, Params& p, RunContext& ctx, Record& r) {
  const auto& cfg = lab.config();
  engine::CwPlan plan;
  const double a = p.num("f_start"), b = p.num("f_stop"), step = p.num("f_step");
  if (!(step > 0.0) || !(b > a)) fail(errc::config, "cw_odmr needs f_stop > f_start and f_step > 0");
  const auto n = static_cast<long>(std::floor((b - a) / step + 1e-9)) + 1;
  for (long i = 0; i < n; ++i) plan.grid.push_back(a + static_cast<double>(i) * step);
  plan.dwell = p.num("dwell");
  plan.sweeps = static_cast<int>(p.integer("sweeps"));
  auto run = engine::run_config(cfg, "cw");
  if (!p.empty("order")) run.sweep_order = config::sweep_order_from_string(p.raw("order"));
  p.set("order", config::to_string(run.sweep_order));
  detail::apply_power(lab, p, "mw_power_dbm", "laser_power", r);
  lab.mw().set_output(true);
  const auto res = lab.run_cw(plan, run, ctx);
  r.partial = res.partial;
  for (const auto& l : res.log) r.warnings.push_back(l);
  r.columns = {{"frequency", "Hz", res.frequency}, {"contrast", "", res.contrast}, {"signal", run.daq_mode == DaqMode::analog ? "V" : "counts/s", res.signal}};
  r.derived["sweeps_completed"] = res.sweeps_completed;
  r.derived["reference"] = res.reference;

  dsp::FitOptions opt;
  opt.max_dips = static_cast<int>(p.integer("max_dips"));
  opt.cancel = ctx.cancel_flag();
  const auto f = detail::try_fit(dsp::Model::lorentzian_multi, res.frequency, res.contrast, opt, r, "lorentzian");
  if (!f) return r;
  r.fits.push_back({"lorentzian", *f});
  const int nd = f->n_dips();
  r.derived["n_lines"] = nd;
  // lines sorted by centre, then matched to the predicted resonances
  std::vector<std::size_t> order(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
  auto centre = [&](std::size_t i) { return f->params[1 + 3 * i]; };
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return centre(x) < centre(y); });
  const auto predicted = spin::resonance_frequencies(cfg.spin, spin::BiasField{cfg.bias_field});
  std::vector<bool> taken(predicted.size(), false);
  double fwhm_min = std::numeric_limits<double>::infinity(), contrast_max = 0.0;
  for (int k = 0; k < nd; ++k) {
    const std::size_t i = order[static_cast<std::size_t>(k)];
    const double c = centre(i), w = std::abs(f->params[2 + 3 * i]), d = f->params[3 + 3 * i];
    const std::string key = "line_" + std::to_string(k);
    r.derived[key + "_frequency"] = c;
    r.derived[key + "_fwhm"] = w;
    r.derived[key + "_contrast"] = d;
    fwhm_min = std::min(fwhm_min, w);
    contrast_max = std::max(contrast_max, d);
    int match = -1;
    double best = std::max(w, 2.0 * step);
    for (std::size_t j = 0; j < predicted.size(); ++j) {
      const double dist = std::abs(predicted[j].frequency - c);
      if (!taken[j] && dist <= best) {
        best = dist;
        match = static_cast<int>(j);
      }
    }
    r.derived[key + "_match"] = match;
    if (match >= 0) {
      taken[static_cast<std::size_t>(match)] = true;
      r.derived[key + "_predicted"] = predicted[static_cast<std::size_t>(match)].frequency;
    } else {
      r.warnings.push_back("line at " + record::fmt(c) + " Hz matches no predicted resonance");
    }
  }
  r.derived["fwhm_min"] = nd > 0 ? fwhm_min : std::numeric_limits<double>::quiet_NaN();
  r.derived["contrast_max"] = contrast_max;
  return r;
}

inline Record rabi(Lab& lab, Params& p, Calibrations& cal, RunContext& ctx, Record& r) {
  const double edge = detail::edge_time(lab, p);
  p.set("edge_time", record::fmt(edge));
  auto taus = linspace(p.num("tau_start"), p.num("tau_stop"), p.integer("points"));
  for (auto& t : taus) t = snap_ns(t);
  if (auto pw = p.opt("mw_power_dbm")) lab.mw().set_power(*pw);
  lab.mw().set_output(true);
  const double expected_pi = 0.5 / lab.mw().rabi_hz();
  if (expected_pi > lab.config().spin.t2_star)
    r.warnings.push_back("expected pi pulse " + record::fmt(expected_pi) + " s exceeds T2* " + record::fmt(lab.config().spin.t2_star) +
                         " s; raise the MW power");
  const auto pr = detail::run_pulsed(lab, p, sequence::Kind::rabi, taus, {}, {}, edge, ctx, r);
  detail::pulsed_columns(r, "tau", pr);
  dsp::FitOptions opt;
  opt.cancel = ctx.cancel_flag();
  const auto f = detail::try_fit(dsp::Model::damped_cosine, pr.x, pr.result.signal[0], opt, r, "rabi");
  if (!f) return r;
  r.fits.push_back({"rabi", *f});
  const double freq = std::abs(f->get("frequency"));
  r.derived["rabi_frequency"] = freq;
  r.derived["pi_len"] = 0.5 / freq;
  r.derived["rabi_decay"] = f->get("decay");
  r.derived["contrast"] = 2.0 * std::abs(f->get("amplitude")) / f->get("offset");
  if (!r.partial) {
    cal.pi_len = 0.5 / freq;
    cal.pi_source = "rabi";
  }
  return r;
}

inline Record pi_calibration(Lab& lab, Params& p, Calibrations& cal, RunContext& ctx, Record& r) {
  const double edge = detail::edge_time(lab, p);
  p.set("edge_time", record::fmt(edge));
  const double a = p.num("tau_start"), b = p.num("tau_stop"), step = p.num("tau_step");
  if (!(step > 0.0) || !(b > a)) fail(errc::config, "pi_calibration needs tau_stop > tau_start and tau_step > 0");
  std::vector<double> taus;
  for (long i = 0; a + static_cast<double>(i) * step <= b + 1e-15; ++i) taus.push_back(snap_ns(a + static_cast<double>(i) * step));
  sequence::Fixed fixed;
  fixed.echo_delay = p.num("echo_delay");
  sequence::Options options;
  options.alternate_final_3pi2 = true;
  const auto pr = detail::run_pulsed(lab, p, sequence::Kind::pi_calibration, taus, fixed, options, edge, ctx, r);
  detail::pulsed_columns(r, "tau", pr);
  if (r.partial) {
    r.warnings.push_back("calibration analysis skipped on partial data");
    return r;
  }
  const auto c = dsp::pi_calibration_analysis(pr.x, pr.result.signal[0], pr.result.signal[1]);
  r.columns.push_back({"smoothed_difference", "", c.smoothed});
  r.derived["pi_optimum"] = c.optimum;
  r.derived["pi_len"] = c.refined;
  r.derived["argmax_half"] = c.argmax_half;
  r.derived["argmin_3half"] = c.argmin_3half;
  r.derived["disagreement"] = c.disagreement ? 1.0 : 0.0;
  if (c.disagreement) r.warnings.push_back("x/2 maximum and 3x/2 minimum disagree by more than one step");
  if (auto rp = p.opt("rabi_pi")) {
    r.derived["rabi_pi"] = *rp;
    r.derived["pi_minus_rabi"] = c.refined - *rp;
    if (std::abs(c.optimum - *rp) > step) r.warnings.push_back("calibrated pi differs from the Rabi-fit value by more than one step");
  }
  cal.pi_len = c.refined;
  cal.pi_source = "pi_calibration";
  return r;
}

inline Record t1(Lab& lab, Params& p, Calibrations& cal, RunContext& ctx, Record& r) {
  sequence::Fixed fixed;
  fixed.pi_len = snap_ns(detail::pi_or_dependency(p, cal, "t1", r));
  p.set("pi_len", record::fmt(fixed.pi_len));
  auto taus = geomspace(p.num("tau_min"), p.num("tau_max"), p.integer("points"));
  for (auto& t : taus) t = snap_ns(t);
  const auto pr = detail::run_pulsed(lab, p, sequence::Kind::t1_alternating, taus, fixed, {}, lab.config().mw_edge_time, ctx, r);
  detail::pulsed_columns(r, "tau", pr);
  const auto& s0 = pr.result.signal[0];
  const auto& s1 = pr.result.signal[1];
  std::vector<double> norm(s0.size());
  for (std::size_t i = 0; i < s0.size(); ++i) norm[i] = (s0[i] - s1[i]) / (s0[i] + s1[i]);
  r.columns.push_back({"normalized", "", norm});
  dsp::FitOptions opt;
  opt.cancel = ctx.cancel_flag();
  if (const auto f = detail::try_fit(dsp::Model::exp_decay, pr.x, norm, opt, r, "t1")) {
    r.fits.push_back({"t1", *f});
    r.derived["t1"] = f->get("T");
  }
  if (const auto f = detail::try_fit(dsp::Model::exp_decay, pr.x, s0, opt, r, "t1_raw_s0")) {
    r.fits.push_back({"t1_raw_s0", *f});
    r.derived["t1_raw_s0"] = f->get("T");
  }
  return r;
}

inline Record ramsey(Lab& lab, Params& p, Calibrations& cal, RunContext& ctx, Record& r) {
  sequence::Fixed fixed;
  fixed.pi_len = snap_ns(detail::pi_or_dependency(p, cal, "ramsey", r));
  p.set("pi_len", record::fmt(fixed.pi_len));
  auto taus = linspace(p.num("tau_start"), p.num("tau_stop"), p.integer("points"));
  for (auto& t : taus) t = snap_ns(t);
  const auto pr = detail::run_pulsed(lab, p, sequence::Kind::ramsey, taus, fixed, {}, lab.config().mw_edge_time, ctx, r);
  detail::pulsed_columns(r, "tau", pr);
  dsp::FitOptions opt;
  opt.cancel = ctx.cancel_flag();
  const auto f = detail::try_fit(dsp::Model::damped_cosine, pr.x, pr.result.signal[0], opt, r, "ramsey");
  if (!f) return r;
  r.fits.push_back({"ramsey", *f});
  r.derived["detuning"] = std::abs(f->get("frequency"));
  r.derived["t2_star"] = f->get("decay");
  return r;
}

inline Record hahn_echo(Lab& lab, Params& p, Calibrations& cal, RunContext& ctx, Record& r) {
  sequence::Fixed fixed;
  fixed.pi_len = snap_ns(detail::pi_or_dependency(p, cal, "hahn_echo", r));
  p.set("pi_len", record::fmt(fixed.pi_len));
  auto taus = linspace(p.num("tau_min"), p.num("tau_max"), p.integer("points"));
  for (auto& t : taus) t = 2.0 * snap_ns(t / 2.0);  // both halves land on the ns grid
  const auto pr = detail::run_pulsed(lab, p, sequence::Kind::hahn_echo, taus, fixed, {}, lab.config().mw_edge_time, ctx, r);
  detail::pulsed_columns(r, "tau", pr);
  dsp::FitOptions opt;
  opt.stretched = p.flag("stretched");
  opt.cancel = ctx.cancel_flag();
  const auto f = detail::try_fit(dsp::Model::exp_decay, pr.x, pr.result.signal[0], opt, r, "echo");
  if (!f) return r;
  r.fits.push_back({"echo", *f});
  r.derived["t2"] = f->get("T");
  if (f->has("beta")) r.derived["beta"] = f->get("beta");
  return r;
}

// ---------------------------------------------------------------------------

/// Run one protocol on `lab`; `cal` supplies and collects prerequisites.
/// Reject a run whose calibration prerequisites are missing, before any acquisition.
inline void check_prerequisites(const config::LabConfig& cfg, const std::string& kind, const Overrides& overrides, const Calibrations& cal) {
  const Params p(cfg, kind, overrides);
  if (kind == "t1" || kind == "ramsey" || kind == "hahn_echo") {
    Record scratch;
    detail::pi_or_dependency(p, cal, kind, scratch);
  }
}

inline Record run_protocol(Lab& lab, const std::string& kind, const Overrides& overrides, Calibrations& cal, RunContext& ctx) {
  Params p(lab.config(), kind, overrides);
  Record r;
  r.kind = kind;
  r.created = record::utc_now();
  r.seed = lab.config().seed;
  r.config = config::to_yaml(lab.config());
  if (overrides.count("pi_len") == 0 && cal.pi_len) r.params["pi_source"] = cal.pi_source;
  detail::stamp_lab(lab, r);
  if (kind == "confocal_map") confocal_map(lab, p, ctx, r);
  else if (kind == "cw_odmr") cw_odmr(lab, p, ctx, r);
  else if (kind == "rabi") rabi(lab, p, cal, ctx, r);
  else if (kind == "pi_calibration") pi_calibration(lab, p, cal, ctx, r);
  else if (kind == "t1") t1(lab, p, cal, ctx, r);
  else if (kind == "ramsey") ramsey(lab, p, cal, ctx, r);
  else if (kind == "hahn_echo") hahn_echo(lab, p, cal, ctx, r);
  else fail(errc::argument, "unknown protocol '" + kind + "'");
  for (const auto& [k, v] : p.values())
    if (!r.params.count(k)) r.params[k] = v;
  return r;
}

/// Rebuild the lab from a record's snapshot and run the protocol again.
struct ReplayOutcome {
  Record fresh;
  std::vector<std::string> diffs;
  bool match() const { return diffs.empty(); }
};

inline ReplayOutcome replay(const Record& rec) {
  auto cfg = config::parse_config(rec.config);
  cfg.seed = rec.seed;
  Lab lab(cfg);
  auto get = [&](const char* k) -> std::optional<double> {
    const auto it = rec.params.find(k);
    if (it == rec.params.end()) return std::nullopt;
    return std::strtod(it->second.c_str(), nullptr);
  };
  if (auto v = get("lab_time")) lab.clock = *v;
  if (auto x = get("focus_x")) lab.focus = {*x, get("focus_y").value_or(0.0), get("focus_z").value_or(0.0)};
  if (auto v = get("laser_power")) {
    lab.laser().set_power = *v;
  }
  Overrides o;
  const auto spec = config::protocol_params().find(rec.kind);
  if (spec == config::protocol_params().end()) fail(errc::data, "record kind '" + rec.kind + "' is not a protocol");
  for (const auto& s : spec->second)
    if (auto it = rec.params.find(s.name); it != rec.params.end()) o[s.name] = it->second;
  Calibrations cal;
  if (auto it = rec.params.find("pi_source"); it != rec.params.end()) cal.pi_source = it->second;
  RunContext ctx;
  ReplayOutcome out;
  out.fresh = run_protocol(lab, rec.kind, o, cal, ctx);
  out.diffs = record::compare(rec, out.fresh);
  return out;
}

// ---------------------------------------------------------------------------
// Emitter tracking

struct TrackPlan {
  double radius = 1.0;  // um, half-width of the local scans
  double step = 0.2;    // um
  double f_sync = 1000.0;
};

/// Local xy raster then a z line through the best pixel; the focus follows.
inline Vec3 track_emitter(Lab& lab, const Vec3& last, const TrackPlan& tp, std::uint64_t seed, RunContext& ctx) {
  if (!(tp.radius > 0.0) || !(tp.step > 0.0)) fail(errc::argument, "tracking radius and step must be > 0");
  const auto& sc = lab.config().scanner;
  auto axis = [&](double c, double Vec3::*m) {
    const double lo = std::max(c - tp.radius, sc.range_min.*m);
    const double hi = std::min(c + tp.radius, sc.range_max.*m);
    const int n = std::max(1, static_cast<int>(std::floor((hi - lo) / tp.step + 1e-9)) + 1);
    return instruments::ScanAxis{lo, lo + tp.step * (n - 1), n};
  };
  auto run = engine::run_config(lab.config(), "scan");
  run.seed = Rng(seed).split("track")();
  const bool counts = run.daq_mode != DaqMode::analog;

  auto check = [&](const std::vector<double>& img) {
    auto v = img;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    const double median = v[v.size() / 2];
    const double peak = *std::max_element(img.begin(), img.end());
    std::vector<double> dev(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) dev[i] = std::abs(img[i] - median);
    std::nth_element(dev.begin(), dev.begin() + static_cast<std::ptrdiff_t>(dev.size() / 2), dev.end());
    double noise = 1.4826 * dev[dev.size() / 2];
    if (counts) noise = std::max(noise, std::sqrt(std::max(median, 1.0)));
    if (peak - median < 5.0 * noise)
      fail(errc::lost_target, "no emitter near (" + record::fmt(last.x) + ", " + record::fmt(last.y) + ", " + record::fmt(last.z) +
                                  ") um: peak " + record::fmt(peak) + " is within 5 sigma of the background " + record::fmt(median));
  };

  instruments::ScanPlan xy{axis(last.x, &Vec3::x), axis(last.y, &Vec3::y), {last.z, last.z, 1}, tp.f_sync};
  const auto a = lab.run_scan(xy, run, ctx);
  if (a.partial) fail(errc::lost_target, "tracking scan aborted");
  check(a.image);
  const Vec3 best = a.positions[a.argmax()];
  instruments::ScanPlan zl{{best.x, best.x, 1}, {best.y, best.y, 1}, axis(last.z, &Vec3::z), tp.f_sync};
  run.seed = Rng(seed).split("track_z")();
  const auto b = lab.run_scan(zl, run, ctx);
  if (b.partial) fail(errc::lost_target, "tracking scan aborted");
  Vec3 out = best;
  out.z = b.positions[b.argmax()].z;
  lab.focus = out;
  return out;
}

// ---------------------------------------------------------------------------
// CW optimization over MW power x laser power

struct CwPoint {
  double mw_power_dbm = 0.0;
  double laser_power = 0.0;
  double rabi_hz = 0.0;
  double fwhm = 0.0;
  double contrast = 0.0;
  bool flat = false;
  double fwhm_error = 0.0;
};

struct CwRecommendation {
  double mw_power_dbm = 0.0;
  double laser_power = 0.0;
  std::vector<CwPoint> points;
  double zero_power_fwhm = std::numeric_limits<double>::quiet_NaN();  // from FWHM^2 vs rabi^2 at the best laser power
};

/// Weighted linear least squares intercept of y over x (unit weights if empty).
inline double intercept(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& w = {}) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    n += wi;
    sx += wi * x[i];
    sy += wi * y[i];
    sxx += wi * x[i] * x[i];
    sxy += wi * x[i] * y[i];
  }
  const double den = n * sxx - sx * sx;
  if (den == 0.0) return sy / n;
  const double slope = (n * sxy - sx * sy) / den;
  return (sy - slope * sx) / n;
}

/// Laser at the contrast maximum; MW at the highest power whose linewidth stays
/// within (1 + tol) of the narrowest one at that laser power.
inline CwRecommendation optimize_cw(Lab& lab, const std::vector<double>& mw_powers, const std::vector<double>& laser_powers,
                                    const Overrides& cw_params, double tol, RunContext& ctx) {
  if (mw_powers.empty() || laser_powers.empty()) fail(errc::argument, "optimize_cw needs a non-empty power grid");
  if (!(tol >= 0.0)) fail(errc::argument, "optimize_cw tolerance must be >= 0");
  const double target = lab.target_line().frequency;
  CwRecommendation rec;
  Calibrations cal;
  for (double lp : laser_powers)
    for (double mp : mw_powers) {
      auto o = cw_params;
      o["mw_power_dbm"] = record::fmt(mp);
      o["laser_power"] = record::fmt(lp);
      const auto r = run_protocol(lab, "cw_odmr", o, cal, ctx);
      if (r.partial) fail(errc::no_signal, "CW optimization aborted");
      CwPoint pt{mp, lp, lab.mw().rabi_hz(), 0.0, 0.0, true};
      if (!r.fits.empty()) {
        const auto& f = r.fits.front().result;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < f.n_dips(); ++i) {
          const double c = f.params[static_cast<std::size_t>(1 + 3 * i)];
          if (std::abs(c - target) < best) {
            best = std::abs(c - target);
            pt.fwhm = std::abs(f.params[static_cast<std::size_t>(2 + 3 * i)]);
            pt.fwhm_error = f.errors[static_cast<std::size_t>(2 + 3 * i)];
            pt.contrast = f.params[static_cast<std::size_t>(3 + 3 * i)];
            pt.flat = false;
          }
        }
      }
      rec.points.push_back(pt);
    }
  const auto live = std::count_if(rec.points.begin(), rec.points.end(), [](const CwPoint& p) { return !p.flat; });
  if (live == 0) fail(errc::no_signal, "all CW spectra are flat: no resonance found on the power grid");
  const CwPoint* best = nullptr;
  for (const auto& p : rec.points)
    if (!p.flat && (!best || p.contrast > best->contrast)) best = &p;
  rec.laser_power = best->laser_power;
  double fmin = std::numeric_limits<double>::infinity();
  std::vector<double> r2, w2, wt;
  for (const auto& p : rec.points)
    if (!p.flat && p.laser_power == rec.laser_power) {
      fmin = std::min(fmin, p.fwhm);
      r2.push_back(p.rabi_hz * p.rabi_hz);
      w2.push_back(p.fwhm * p.fwhm);
      // FWHM^2 is weighted by its propagated fit variance
      const double sd = 2.0 * p.fwhm * p.fwhm_error;
      wt.push_back(sd > 0.0 && std::isfinite(sd) ? 1.0 / (sd * sd) : 0.0);
    }
  double mw = -std::numeric_limits<double>::infinity();
  for (const auto& p : rec.points)
    if (!p.flat && p.laser_power == rec.laser_power && p.fwhm <= (1.0 + tol) * fmin) mw = std::max(mw, p.mw_power_dbm);
  rec.mw_power_dbm = mw;
  if (r2.size() >= 2) rec.zero_power_fwhm = std::sqrt(std::max(0.0, intercept(r2, w2, std::all_of(wt.begin(), wt.end(), [](double v) { return v > 0.0; }) ? wt : std::vector<double>{})));
  return rec;
}

}  // namespace virtlab::protocols
