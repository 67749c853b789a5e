#pragma once

// Acquisition engine: wires the virtual instruments for CW sweeps, pulsed
// sequences (NP/PN averaging x sync method 1/2) and confocal scans, and runs
// one job at a time on a worker thread with pause/resume/abort and a bounded
// stream of partial results.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "virtlab/config.hpp"
#include "virtlab/dsp.hpp"
#include "virtlab/error.hpp"
#include "virtlab/instruments.hpp"
#include "virtlab/optics.hpp"
#include "virtlab/rng.hpp"
#include "virtlab/sequence.hpp"
#include "virtlab/spin_model.hpp"

namespace virtlab::engine {

using config::LabConfig;
using config::SweepOrder;
using instruments::DaqMode;
using instruments::DetectorConfig;
using instruments::DetectorKind;
using instruments::RawSamples;
using sequence::Averaging;
using sequence::CompiledSequence;
using sequence::SyncMethod;
using sequence::Variant;

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::string detector;  // name in config.detectors
  DaqMode daq_mode = DaqMode::analog;
  Averaging averaging = Averaging::pn;
  SyncMethod sync = SyncMethod::method2;
  std::int64_t n_repeats = 1;
  std::uint64_t seed = 1;
  SweepOrder sweep_order = SweepOrder::up;
  bool blind = false;  // method1: locate readout pulses by extraction only
};

/// Defaults for an experiment family ("pulsed", "cw", "scan") from the config.
inline RunConfig run_config(const LabConfig& c, const std::string& family) {
  RunConfig r;
  const auto w = c.wiring.find(family);
  if (w == c.wiring.end()) fail(errc::config, "no wiring entry for '" + family + "'");
  r.detector = w->second.detector;
  r.daq_mode = w->second.daq_mode;
  r.averaging = c.engine.averaging;
  r.sync = c.engine.sync;
  r.n_repeats = c.engine.n_repeats;
  r.seed = c.seed;
  r.sweep_order = c.engine.sweep_order;
  r.blind = c.engine.blind;
  return r;
}

inline const DetectorConfig& detector_for(const LabConfig& c, const RunConfig& r) {
  const auto d = c.detectors.find(r.detector);
  if (d == c.detectors.end()) fail(errc::config, "run references unknown detector '" + r.detector + "'");
  instruments::check_pairing(d->second.kind, r.daq_mode);
  return d->second;
}

// ---------------------------------------------------------------------------
// Live partials

enum class PartialKind { spectrum, pulsed, scan_row };

inline const char* to_string(PartialKind k) {
  switch (k) {
    case PartialKind::spectrum: return "spectrum";
    case PartialKind::pulsed: return "pulsed";
    case PartialKind::scan_row: return "scan_row";
  }
  return "?";
}

inline PartialKind partial_kind_from_string(const std::string& s) {
  if (s == "spectrum") return PartialKind::spectrum;
  if (s == "pulsed") return PartialKind::pulsed;
  if (s == "scan_row") return PartialKind::scan_row;
  fail(errc::data, "unknown partial type '" + s + "'");
}

struct Partial {
  PartialKind kind = PartialKind::spectrum;
  std::uint64_t run_id = 0;
  std::uint64_t seq = 0;  // strictly increasing per run
  int index = 0;          // sweeps, repetitions or series completed; scan row
  double progress = 0.0;
  double snr = 0.0;
  std::vector<double> x, y, y2;
};

/// Bounded FIFO that drops its oldest entry when full.
class PartialBuffer {
public:
  explicit PartialBuffer(std::size_t capacity = 256) : capacity_(std::max<std::size_t>(1, capacity)) {}

  void push(Partial p) {
    std::lock_guard lock(m_);
    if (q_.size() == capacity_) {
      q_.pop_front();
      ++dropped_;
    }
    q_.push_back(std::move(p));
  }
  std::vector<Partial> snapshot() const {
    std::lock_guard lock(m_);
    return {q_.begin(), q_.end()};
  }
  std::size_t dropped() const {
    std::lock_guard lock(m_);
    return dropped_;
  }
  void clear() {
    std::lock_guard lock(m_);
    q_.clear();
  }

private:
  mutable std::mutex m_;
  std::size_t capacity_;
  std::deque<Partial> q_;
  std::size_t dropped_ = 0;
};

enum class State { idle, running, paused, finished, aborted, failed };

inline const char* to_string(State s) {
  switch (s) {
    case State::idle: return "idle";
    case State::running: return "running";
    case State::paused: return "paused";
    case State::finished: return "finished";
    case State::aborted: return "aborted";
    case State::failed: return "failed";
  }
  return "?";
}

/// Cooperative link between a running job and its controller. A default
/// context never pauses or aborts and discards partials.
class RunContext {
public:
  using Sink = std::function<void(const Partial&)>;

  RunContext() = default;
  explicit RunContext(Sink sink, std::uint64_t run_id = 0) : sink_(std::move(sink)), run_id_(run_id) {}

  /// Blocks while paused; false once an abort was requested.
  bool checkpoint() {
    if (abort_.load()) return false;
    if (!paused_.load()) return true;
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return !paused_.load() || abort_.load(); });
    return !abort_.load();
  }

  void report(double progress, double current, double snr) {
    std::lock_guard lock(m_);
    progress_ = progress;
    current_ = current;
    snr_ = snr;
  }

  void emit(Partial p) {
    p.run_id = run_id_;
    {
      std::lock_guard lock(m_);
      p.seq = seq_++;
    }
    if (sink_) sink_(p);
  }

  /// Real-time pacing: wait until the wall clock catches up with `sim_seconds`.
  void pace(double sim_seconds) {
    if (!realtime_) return;
    const auto target = wall0_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(sim_seconds));
    std::unique_lock lock(m_);
    cv_.wait_until(lock, target, [&] { return abort_.load(); });
  }

  void set_realtime(bool on) {
    realtime_ = on;
    wall0_ = std::chrono::steady_clock::now();
  }
  void pause() { paused_ = true; }
  void resume() {
    paused_ = false;
    cv_.notify_all();
  }
  void abort() {
    abort_ = true;
    cv_.notify_all();
  }
  bool paused() const { return paused_.load(); }
  bool aborted() const { return abort_.load(); }
  const std::atomic<bool>* cancel_flag() const { return &abort_; }
  std::uint64_t run_id() const { return run_id_; }

  double progress() const {
    std::lock_guard lock(m_);
    return progress_;
  }
  double current() const {
    std::lock_guard lock(m_);
    return current_;
  }
  double snr() const {
    std::lock_guard lock(m_);
    return snr_;
  }

private:
  mutable std::mutex m_;
  std::condition_variable cv_;
  std::atomic<bool> paused_{false};
  std::atomic<bool> abort_{false};
  Sink sink_;
  std::uint64_t run_id_ = 0;
  std::uint64_t seq_ = 0;
  double progress_ = 0.0, current_ = 0.0, snr_ = 0.0;
  bool realtime_ = false;
  std::chrono::steady_clock::time_point wall0_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Results

struct CwPlan {
  std::vector<double> grid;  // Hz
  double dwell = 10e-3;      // s per point
  int sweeps = 1;
};

struct CwResult {
  std::vector<double> frequency;
  std::vector<double> contrast;  // mean signal / off-resonance mean (grid edges)
  std::vector<double> signal;    // mean raw signal per point (counts/s or V)
  std::vector<int> samples;      // sweeps contributing to each point
  int sweeps_completed = 0;
  double reference = 0.0;        // off-resonance mean
  bool partial = false;
  std::vector<std::string> log;
  double duration = 0.0;         // simulated seconds
};

struct PulsedPlan {
  dsp::WindowPlan windows;
  double detuning = 0.0;    // MW frequency minus line centre, Hz
  double edge_time = 0.0;   // MW envelope rise/fall, s
  dsp::ExtractionConfig extraction;
};

/// Where one readout window lives in the raw records.
struct WindowMap {
  std::size_t record = 0;
  int param = 0;
  Variant variant = Variant::s0;
  std::int64_t repetition = 0;
  double rise = 0.0;  // s, absolute
  double fall = 0.0;
  double stop = 0.0;  // end of the integrated span (fall + guard, clipped)
};

struct RawRun {
  std::vector<RawSamples> records;  // method2: one per window; method1: one per series
  std::vector<double> record_stop;  // s, end of each record
  std::vector<double> sync_edges;   // s
  std::vector<WindowMap> mapping;
  std::vector<std::int64_t> accumulator;  // repetitions accumulated per (variant, param)
  std::vector<std::string> log;
  bool overflow = false;

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.mode == DaqMode::time_tag ? r.tags.size() : r.values.size();
    return n;
  }
};

struct PulsedResult {
  std::vector<double> x;
  std::vector<std::vector<double>> signal;  // [variant][param], ratio of summed window means
  std::vector<std::vector<double>> error;   // standard error of the per-window ratios
  std::vector<double> window_integral;      // per mapped window, mapping order
  std::vector<double> window_signal;
  std::vector<double> snr_history;          // PN: after each repetition
  RawRun raw;
  std::int64_t completed = 0;               // PN repetitions / NP series finished
  bool partial = false;
  std::vector<std::string> log;
  double duration = 0.0;
};

struct ScanResult {
  instruments::ScanPlan plan;
  std::vector<double> image;  // row-major, x fastest then y then z
  std::vector<Vec3> positions;
  int rows_completed = 0;
  bool partial = false;
  double duration = 0.0;

  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(image.begin(), image.end()) - image.begin());
  }
};

// ---------------------------------------------------------------------------
// Lab: the wired virtual instruments

namespace detail {

struct LaserPulse {
  std::int64_t on = 0, off = 0;  // ns
  std::int64_t dark_before = 0;  // ns since the previous laser pulse ended
  double p1 = 0.0;
  int window = -1;               // index into readout_windows, -1 for unrecorded pulses
  std::int64_t series = 0;       // method1 recording the pulse belongs to
};

inline double tail_mean(const std::vector<double>& v, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t i = a; i < b; ++i) s += v[i];
  return s / static_cast<double>(b - a);
}

}  // namespace detail

class Lab {
public:
  explicit Lab(LabConfig cfg) : cfg_(std::move(cfg)), mw_(cfg_.mw), laser_(cfg_.laser) {
    cfg_.validate();
    optics_ = optics::report(cfg_.objective, cfg_.geometry);
    if (!cfg_.sample.emitters.empty()) focus = cfg_.sample.emitters.front().position;
  }

  const LabConfig& config() const { return cfg_; }
  instruments::MwSource& mw() { return mw_; }
  instruments::LaserModel& laser() { return laser_; }
  instruments::VirtualSample& sample() { return cfg_.sample; }
  const optics::OpticsReport& optics() const { return optics_; }

  Vec3 focus{0.0, 0.0, 0.0};  // um
  double clock = 0.0;         // lab time, s (sample drift reference)

  /// Per-centre emission at laser excitation rate k: r_sat k / (k + k_ref).
  double emission_per_centre(double k) const {
    const auto& p = cfg_.spin;
    return p.r_sat * k / (k + p.reference_laser_rate);
  }
  /// Detected photon rate from the addressed ensemble at the current laser power.
  double brightness() const {
    return cfg_.collection * cfg_.spin.n_centers * emission_per_centre(laser_.excitation_rate());
  }

  spin::ResonanceLine target_line() const {
    const auto lines = spin::resonance_frequencies(cfg_.spin, spin::BiasField{cfg_.bias_field});
    return lines.at(static_cast<std::size_t>(cfg_.target_line));
  }

  // -------------------------------------------------------------------------
  CwResult run_cw(const CwPlan& plan, const RunConfig& run, RunContext& ctx) {
    if (plan.grid.empty()) fail(errc::argument, "CW grid is empty");
    if (plan.sweeps < 1) fail(errc::argument, "CW run needs at least one sweep");
    if (plan.dwell < cfg_.mw.min_dwell * (1.0 - 1e-12))
      fail(errc::timing, "dwell " + sequence::fmt17(plan.dwell) + " s is below the MW source min_dwell " +
                             sequence::fmt17(cfg_.mw.min_dwell) + " s");
    const DetectorConfig& det = detector_for(cfg_, run);
    if (run.daq_mode == DaqMode::time_tag) fail(errc::config, "CW runs integrate counts per dwell; use binned_counts");
    const std::size_t n = plan.grid.size();

    const bool mw_on = mw_.output_on();
    const double rabi = mw_.rabi_hz();
    const double k = laser_.excitation_rate();
    if (!(k > 0.0)) fail(errc::config, "CW run needs the laser on (set_power > 0)");
    // applied frequencies include any source-side offset
    std::vector<double> applied(n);
    for (std::size_t i = 0; i < n; ++i) {
      mw_.set_cw(plan.grid[i]);
      applied[i] = mw_.frequency();
    }
    const auto spec = spin::cw_spectrum(cfg_.spin, spin::BiasField{cfg_.bias_field}, rabi, k, applied);
    const double bright = brightness();

    CwResult out;
    out.frequency = plan.grid;
    out.signal.assign(n, 0.0);
    out.contrast.assign(n, std::numeric_limits<double>::quiet_NaN());
    out.samples.assign(n, 0);
    std::vector<double> sum(n, 0.0);

    Rng root = Rng(run.seed).split("cw");
    instruments::LaserDrift drift(laser_, root.split("laser_drift"));
    const std::size_t edge = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.02 * static_cast<double>(n))));
    std::vector<std::size_t> order(n);
    double t = 0.0;
    bool stop = false;
    for (int s = 0; s < plan.sweeps && !stop; ++s) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      if (run.sweep_order == SweepOrder::down) std::reverse(order.begin(), order.end());
      if (run.sweep_order == SweepOrder::random) {
        Rng perm = root.split("order", static_cast<std::uint64_t>(s));
        std::shuffle(order.begin(), order.end(), perm);
      }
      std::vector<double> list(n);
      for (std::size_t j = 0; j < n; ++j) list[j] = plan.grid[order[j]];
      mw_.set_list(list);
      mw_.set_output(mw_on);
      for (std::size_t j = 0; j < n; ++j) {
        if (!ctx.checkpoint()) {
          stop = true;
          break;
        }
        if (j > 0 && mw_on) mw_.step(t);
        const std::size_t i = order[j];
        const double rate = bright * spec.relative_pl[i] * drift.at(t + 0.5 * plan.dwell);
        Rng r = root.split("point", static_cast<std::uint64_t>(s) * n + j);
        double value;
        if (det.kind == DetectorKind::digital_pc) {
          const double mean = instruments::registered_rate(rate, det) * plan.dwell;
          value = static_cast<double>(std::poisson_distribution<long long>(mean)(r)) / plan.dwell;
        } else {
          const double sigma = det.noise_density / std::sqrt(2.0 * plan.dwell);
          value = det.responsivity * rate + (sigma > 0.0 ? std::normal_distribution<double>(0.0, sigma)(r) : 0.0);
        }
        sum[i] += value;
        ++out.samples[i];
        t += plan.dwell;
        ctx.report((static_cast<double>(s) * n + j + 1) / (static_cast<double>(plan.sweeps) * n), plan.grid[i], 0.0);
        ctx.pace(t);
      }
      if (!stop) {
        out.sweeps_completed = s + 1;
        finish_cw(out, sum, edge);
        Partial p;
        p.kind = PartialKind::spectrum;
        p.index = s + 1;
        p.progress = static_cast<double>(s + 1) / plan.sweeps;
        p.x = out.frequency;
        p.y = out.contrast;
        ctx.emit(std::move(p));
      }
    }
    if (stop) {
      out.partial = true;
      finish_cw(out, sum, edge);
    }
    for (const auto& l : mw_.log()) out.log.push_back(l);
    out.duration = t;
    clock += t;
    return out;
  }

  // -------------------------------------------------------------------------
  PulsedResult run_pulsed(const CompiledSequence& seq, const PulsedPlan& plan, const RunConfig& run, RunContext& ctx) {
    if (seq.averaging != run.averaging || seq.sync_method != run.sync)
      fail(errc::config, std::string("sequence compiled for ") + sequence::to_string(seq.averaging) + "/" +
                             sequence::to_string(seq.sync_method) + " but the run asks for " +
                             sequence::to_string(run.averaging) + "/" + sequence::to_string(run.sync));
    if (seq.n_repeats != run.n_repeats)
      fail(errc::config, "sequence repeats " + std::to_string(seq.n_repeats) + " != run n_repeats " + std::to_string(run.n_repeats));
    plan.windows.validate();
    const DetectorConfig& det = detector_for(cfg_, run);
    const auto& daq = cfg_.daq;
    const bool analog = det.kind == DetectorKind::analog_pd;
    const double period = analog ? daq.analog_period() : 1.0 / daq.counter_clock;
    if (run.averaging == Averaging::pn && period > 0.5 * (plan.windows.signal_stop - plan.windows.signal_start))
      fail(errc::config, "PN averaging needs a DAQ that resolves single pulses: sample period " + sequence::fmt17(period) +
                             " s is coarser than half the signal window");
    const double sim_dt = cfg_.engine.sim_dt;
    const double guard = cfg_.engine.window_guard;
    const auto& sp = cfg_.spin;
    const bool method1 = run.sync == SyncMethod::method1;
    const int V = seq.variants;
    const int P = seq.n_params();

    // MW drive on the addressed line
    const auto line = target_line();
    mw_.set_cw(line.frequency + plan.detuning);
    mw_.set_output(true);
    const double rabi = spin::kTwoPi * mw_.rabi_hz();
    const double offset = mw_.frequency() - line.frequency;

    // spin state at every laser pulse
    const auto pulses = laser_timeline(seq, rabi, offset, plan.edge_time, run.seed);

    const double k = laser_.excitation_rate();
    const double bright = brightness();
    const double tau_pol = sp.tau_pol_at(k);
    const double C = sp.readout_contrast;
    const double lp_rate = 2.0 * std::numbers::pi * det.bandwidth;

    PulsedResult out;
    out.x = seq.sweep_values;
    RawRun& raw = out.raw;
    for (auto e : seq.sync_edges) raw.sync_edges.push_back(sequence::seconds(e));
    raw.accumulator.assign(static_cast<std::size_t>(V * P), 0);
    std::vector<double> acc_sig(static_cast<std::size_t>(V * P), 0.0), acc_ref(acc_sig.size(), 0.0);
    std::vector<double> s_sum(acc_sig.size(), 0.0), s_sq(acc_sig.size(), 0.0);
    const auto slot = [&](int variant, int param) { return static_cast<std::size_t>(variant * P + param); };

    Rng root = Rng(run.seed).split("pulsed");
    instruments::LaserDrift drift(laser_, root.split("laser_drift"));
    instruments::LowPass lp;
    lp.primed = true;
    double last_event = -std::numeric_limits<double>::infinity();
    double prev_end = 0.0;  // s, end of the previous simulated segment
    std::uint64_t gap_index = 0;

    const auto& plan_w = plan.windows;
    const double ss = plan_w.signal_start, se = plan_w.signal_stop, rs = plan_w.reference_start, re = plan_w.reference_stop;

    // analysis of one mapped window on a trace
    std::size_t windows_done = 0;
    const std::size_t per_group = static_cast<std::size_t>(V) * (run.averaging == Averaging::pn ? P : run.n_repeats);
    auto analyze = [&](const WindowMap& m, const dsp::Trace& tr) {
      const double sig = dsp::integrate(tr, m.rise + ss, m.rise + se) / (se - ss);
      const double ref = dsp::integrate(tr, m.rise + rs, m.rise + re) / (re - rs);
      const int v = static_cast<int>(m.variant);
      const auto i = slot(v, m.param);
      acc_sig[i] += sig;
      acc_ref[i] += ref;
      const double s = sig / ref;
      s_sum[i] += s;
      s_sq[i] += s * s;
      ++raw.accumulator[i];
      out.window_integral.push_back(dsp::integrate(tr, m.rise, m.stop));
      out.window_signal.push_back(s);
      raw.mapping.push_back(m);
      ++windows_done;
      if (windows_done % per_group == 0) group_done(out, seq, run, acc_sig, acc_ref, s_sum, s_sq, windows_done / per_group, ctx);
    };

    // -------- simulate pulse segments, record per sync method
    struct Series {
      RawSamples rec;
      std::vector<double> events;  // digital, absolute
      std::size_t filled = 0;
      std::size_t n = 0;
      double t0 = 0.0, t1 = 0.0;
      std::vector<std::size_t> pulse_ids;
      bool open = false;
    } series;
    const std::size_t n_series = method1 ? seq.sync_edges.size() / 2 : 0;
    std::size_t series_index = 0;

    auto gap_fill_analog = [&](Series& s, double until) {
      Rng g = root.split("gap", gap_index++);
      std::normal_distribution<double> noise(0.0, det.noise_rms());
      const double y_end = lp.y;
      while (s.filled < s.n) {
        const double tk = s.t0 + static_cast<double>(s.filled) * period;
        if (tk >= until - 1e-15) break;
        const double decay = std::exp(-lp_rate * std::max(0.0, tk - prev_end));
        s.rec.values[s.filled++] = y_end * decay + (det.noise_rms() > 0.0 ? noise(g) : 0.0);
      }
    };
    auto gap_events = [&](Series& s, double a, double b) {
      if (b <= a || det.dark_rate <= 0.0) return;
      Rng g = root.split("gap", gap_index++);
      const auto kk = std::poisson_distribution<long>(det.dark_rate * (b - a))(g);
      std::vector<double> ev;
      for (long j = 0; j < kk; ++j) ev.push_back(a + g.uniform() * (b - a));
      std::sort(ev.begin(), ev.end());
      instruments::apply_dead_time(ev, det.hold_off(), &last_event);
      s.events.insert(s.events.end(), ev.begin(), ev.end());
    };
    auto open_series = [&]() {
      series = Series{};
      series.t0 = raw.sync_edges[2 * series_index];
      // keep recording one guard past the closing edge: the detector response
      // of the last pulse must not be cut off
      series.t1 = raw.sync_edges[2 * series_index + 1] + guard;
      series.n = static_cast<std::size_t>(std::floor((series.t1 - series.t0) / period + 1e-9));
      if (series.n > daq.buffer_capacity) {
        raw.overflow = true;
        raw.log.push_back("buffer_overrun: series " + std::to_string(series_index) + " needs " + std::to_string(series.n) +
                          " samples, buffer holds " + std::to_string(daq.buffer_capacity));
        return false;
      }
      series.rec.mode = run.daq_mode;
      series.rec.t0 = series.t0;
      series.rec.period = analog ? period : (run.daq_mode == DaqMode::time_tag ? daq.tag_resolution() : period);
      if (analog) series.rec.values.assign(series.n, 0.0);
      series.open = true;
      return true;
    };
    auto close_series = [&]() {
      if (analog) {
        gap_fill_analog(series, series.t1);
      } else {
        gap_events(series, std::max(prev_end, series.t0), series.t1);
        instruments::PhotonEvents ev{series.t0, series.t1, series.events};
        if (run.daq_mode == DaqMode::binned_counts) {
          auto binned = instruments::daq_bin_counts(ev, daq, series.t0, period, series.n);
          series.rec.values = std::move(binned.values);
        } else {
          auto tagged = instruments::daq_time_tag(ev, daq);
          series.rec.tags = std::move(tagged.tags);
        }
      }
      const std::size_t rec_index = raw.records.size();
      raw.records.push_back(std::move(series.rec));
      raw.record_stop.push_back(series.t1);
      const dsp::Trace tr = record_trace(raw.records.back(), series.t1, period);
      // window mapping: declared windows or blind extraction
      std::vector<std::pair<double, double>> edges;  // per pulse id in this series
      if (run.blind) {
        auto cfg = plan.extraction;
        const auto ex = dsp::extract_pulses(tr, cfg);
        if (ex.pulses.size() != series.pulse_ids.size())
          fail(errc::window, "blind extraction found " + std::to_string(ex.pulses.size()) + " pulses in series " +
                                 std::to_string(series_index) + ", expected " + std::to_string(series.pulse_ids.size()));
        for (const auto& e : ex.pulses) edges.emplace_back(e.rise, e.fall);
      } else {
        for (auto id : series.pulse_ids) edges.emplace_back(sequence::seconds(pulses[id].on), sequence::seconds(pulses[id].off));
      }
      for (std::size_t j = 0; j < series.pulse_ids.size(); ++j) {
        const auto& p = pulses[series.pulse_ids[j]];
        if (p.window < 0) continue;
        const auto& w = seq.readout_windows[static_cast<std::size_t>(p.window)];
        const double next_on = series.pulse_ids.size() > j + 1 ? sequence::seconds(pulses[series.pulse_ids[j + 1]].on) : series.t1;
        WindowMap m{rec_index, w.param, w.variant, w.repetition, edges[j].first, edges[j].second,
                    std::min(edges[j].second + guard, std::min(next_on, series.t1))};
        analyze(m, tr);
      }
      series.open = false;
      ++series_index;
    };

    bool stopped = false;
    const double total = sequence::seconds(seq.total_duration);
    for (std::size_t pi = 0; pi < pulses.size(); ++pi) {
      if (!ctx.checkpoint()) {
        stopped = true;
        break;
      }
      const auto& p = pulses[pi];
      const double on = sequence::seconds(p.on), off = sequence::seconds(p.off);
      const double next_on = pi + 1 < pulses.size() ? sequence::seconds(pulses[pi + 1].on) : std::numeric_limits<double>::infinity();
      const double seg_end = std::min(off + guard, next_on);

      if (method1) {
        while (series.open && on >= series.t1 - guard) close_series();
        if (!series.open) {
          if (series_index >= n_series || on < raw.sync_edges[2 * series_index]) fail(errc::timing, "laser pulse outside any method1 recording");
          if (!open_series()) {
            stopped = true;
            break;
          }
        }
        series.pulse_ids.push_back(pi);
      }

      // optical rate over the segment
      const auto n_sim = static_cast<std::size_t>(std::llround((seg_end - on) / sim_dt));
      instruments::RateTrace rt{on, sim_dt, std::vector<double>(n_sim, 0.0)};
      const double off_before = sequence::seconds(p.dark_before);
      const auto n_on = static_cast<std::size_t>(std::llround((off - on) / sim_dt));
      for (std::size_t i = 0; i < std::min(n_on, n_sim); ++i) {
        const double ti = static_cast<double>(i) * sim_dt;
        rt.rate[i] = bright * laser_.overshoot(off_before, ti) * drift.at(on + ti) * (1.0 - C * p.p1 * std::exp(-ti / tau_pol));
      }

      Rng prng = root.split("pulse", static_cast<std::uint64_t>(pi));
      if (analog) {
        if (method1) gap_fill_analog(series, on);
        lp.y *= std::exp(-lp_rate * std::max(0.0, on - prev_end));
        const auto at = instruments::detect_analog(rt, det, prng, &lp);
        prev_end = seg_end;
        if (method1) {
          while (series.filled < series.n) {
            const double tk = series.t0 + static_cast<double>(series.filled) * period;
            if (tk >= seg_end - 1e-15) break;
            auto idx = static_cast<std::int64_t>(std::floor((tk - on) / sim_dt + 1e-9));
            idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(at.volts.size()) - 1);
            series.rec.values[series.filled++] = at.volts[static_cast<std::size_t>(idx)];
          }
        } else if (p.window >= 0) {
          const auto n = static_cast<std::size_t>(std::floor((seg_end - on) / period + 1e-9));
          if (!record_window(raw, instruments::daq_sample_analog(at, daq, on, n), seg_end)) {
            stopped = true;
            break;
          }
        }
      } else {
        if (method1) gap_events(series, std::max(prev_end, series.t0), on);
        const auto ev = instruments::detect_digital(rt, det, prng, &last_event);
        prev_end = seg_end;
        if (method1) {
          series.events.insert(series.events.end(), ev.times.begin(), ev.times.end());
        } else if (p.window >= 0) {
          const auto n = static_cast<std::size_t>(std::floor((seg_end - on) / period + 1e-9));
          RawSamples rec = run.daq_mode == DaqMode::binned_counts ? instruments::daq_bin_counts(ev, daq, on, period, n)
                                                                  : instruments::daq_time_tag(ev, daq);
          rec.t0 = on;
          if (!record_window(raw, std::move(rec), seg_end)) {
            stopped = true;
            break;
          }
        }
      }
      if (!method1 && p.window >= 0) {
        const auto& w = seq.readout_windows[static_cast<std::size_t>(p.window)];
        const dsp::Trace tr = record_trace(raw.records.back(), seg_end, period);
        analyze(WindowMap{raw.records.size() - 1, w.param, w.variant, w.repetition, on, off, seg_end}, tr);
      }
      ctx.report(std::min(1.0, seg_end / total), current_param(seq, p), out.snr_history.empty() ? 0.0 : out.snr_history.back());
      ctx.pace(seg_end);
    }
    if (method1 && series.open && !stopped) close_series();
    if (method1 && !stopped) {
      // recordings that contain no laser pulse still belong to the run
      while (series_index < n_series) {
        if (!open_series()) {
          stopped = true;
          break;
        }
        close_series();
      }
    }
    out.partial = stopped || raw.overflow;
    finish_signal(out, seq, acc_sig, acc_ref, s_sum, s_sq, raw.accumulator);
    out.log = raw.log;
    out.duration = stopped ? prev_end : total;
    clock += out.duration;
    return out;
  }

  // -------------------------------------------------------------------------
  ScanResult run_scan(const instruments::ScanPlan& plan, const RunConfig& run, RunContext& ctx) {
    const auto wf = instruments::scanner_waveforms(plan, cfg_.scanner);
    const DetectorConfig& det = detector_for(cfg_, run);
    if (run.daq_mode == DaqMode::time_tag) fail(errc::config, "scans integrate counts per pixel; use binned_counts");
    const double dwell = 1.0 / plan.f_sync;
    const double per_centre = cfg_.collection * emission_per_centre(laser_.excitation_rate());
    Rng root = Rng(run.seed).split("scan");
    ScanResult out;
    out.plan = plan;
    out.positions = wf.positions;
    out.image.assign(wf.positions.size(), 0.0);
    const auto row_len = static_cast<std::size_t>(plan.x.n);
    const double t_start = clock;
    for (std::size_t k = 0; k < wf.positions.size(); ++k) {
      if (!ctx.checkpoint()) {
        out.partial = true;
        break;
      }
      const double t = wf.sync_edges[k];
      const double rate = instruments::confocal_rate(cfg_.sample, wf.positions[k], optics_, t_start + t + 0.5 * dwell, per_centre);
      Rng r = root.split("pixel", k);
      if (det.kind == DetectorKind::digital_pc) {
        out.image[k] = static_cast<double>(std::poisson_distribution<long long>(instruments::registered_rate(rate, det) * dwell)(r));
      } else {
        const double sigma = det.noise_density / std::sqrt(2.0 * dwell);
        out.image[k] = det.responsivity * rate + (sigma > 0.0 ? std::normal_distribution<double>(0.0, sigma)(r) : 0.0);
      }
      ctx.report(static_cast<double>(k + 1) / static_cast<double>(wf.positions.size()), static_cast<double>(k), 0.0);
      ctx.pace(t + dwell);
      if ((k + 1) % row_len == 0) {
        Partial p;
        p.kind = PartialKind::scan_row;
        p.index = out.rows_completed++;
        p.progress = static_cast<double>(k + 1) / static_cast<double>(wf.positions.size());
        for (std::size_t i = 0; i < row_len; ++i) p.x.push_back(plan.x.at(static_cast<int>(i)));
        p.y.assign(out.image.begin() + static_cast<std::ptrdiff_t>(k + 1 - row_len), out.image.begin() + static_cast<std::ptrdiff_t>(k + 1));
        ctx.emit(std::move(p));
      }
    }
    out.duration = static_cast<double>(out.rows_completed) * row_len * dwell;
    clock += out.duration;
    return out;
  }

  /// Laser pulses of the whole program with the ensemble p1 at each pulse.
  std::vector<detail::LaserPulse> laser_timeline(const CompiledSequence& seq, double rabi, double offset, double edge_time,
                                                 std::uint64_t seed) const {
    const auto& sp = cfg_.spin;
    const double fraction = target_line().centre_fraction();
    const auto detunings = spin::sample_detunings(sp, static_cast<std::size_t>(cfg_.engine.ensemble_size), seed);
    const spin::SpinState reset{0.0, 0.0, 1.0 - sp.shelf_fraction, sp.shelf_fraction};
    std::map<std::pair<std::size_t, std::int64_t>, std::vector<double>> cache;

    auto simulate = [&](const sequence::Block& b, std::int64_t entry_dark) {
      spin::Ensemble ens(sp, fraction, detunings);
      ens.set_all(spin::relax(reset, sp, sequence::seconds(entry_dark)));
      std::vector<double> p1;
      std::int64_t cur = 0;
      for (const auto& pulse : b.pulses) {
        if (pulse.channel != instruments::ch_mw && pulse.channel != instruments::ch_laser) continue;
        const std::int64_t start = std::max(cur, pulse.start);
        if (start > cur) ens.free(sequence::seconds(start - cur), offset);
        if (pulse.channel == instruments::ch_mw) {
          ens.mw_pulse(rabi, offset, sequence::seconds(pulse.stop - start), pulse.phase, edge_time);
        } else {
          p1.push_back(ens.p1_total());
          ens.repolarize();
        }
        cur = std::max(cur, pulse.stop);
      }
      return p1;
    };

    std::vector<detail::LaserPulse> out;
    std::int64_t t = 0, last_off = 0;
    std::size_t window_base = 0;
    std::int64_t series = -1;
    for (std::int64_t r = 0; r < seq.program.repetitions; ++r) {
      for (std::size_t bi = 0; bi < seq.blocks.size(); ++bi) {
        const auto& b = seq.blocks[bi];
        for (std::int64_t k = 0; k < b.repeat; ++k) {
          if (b.role == sequence::BlockRole::series_start) ++series;
          bool has_laser = false;
          for (const auto& p : b.pulses) has_laser = has_laser || p.channel == instruments::ch_laser;
          if (has_laser) {
            const std::int64_t entry = t - last_off;
            auto it = cache.find({bi, entry});
            if (it == cache.end()) it = cache.emplace(std::make_pair(bi, entry), simulate(b, entry)).first;
            std::size_t li = 0;
            for (const auto& p : b.pulses) {
              if (p.channel != instruments::ch_laser) continue;
              detail::LaserPulse lp;
              lp.on = t + p.start;
              lp.off = t + p.stop;
              lp.dark_before = lp.on - last_off;
              lp.p1 = it->second[li++];
              lp.series = std::max<std::int64_t>(series, 0);
              for (std::size_t j = 0; j < b.windows.size(); ++j)
                if (b.windows[j].start == p.start) lp.window = static_cast<int>(window_base + j);
              last_off = lp.off;
              out.push_back(lp);
            }
          }
          window_base += b.windows.size();
          t += b.duration;
        }
      }
    }
    return out;
  }

private:
  static dsp::Trace record_trace(const RawSamples& rec, double stop, double bin) {
    dsp::Trace tr;
    tr.t0 = rec.t0;
    if (rec.mode != DaqMode::time_tag) {
      tr.dt = rec.period;
      tr.y = rec.values;
      return tr;
    }
    tr.dt = bin;
    tr.y.assign(static_cast<std::size_t>(std::max(0.0, std::ceil((stop - rec.t0) / bin - 1e-9))), 0.0);
    for (auto tag : rec.tags) {
      const double t = static_cast<double>(tag) * rec.period;
      const double kf = std::floor((t - rec.t0) / bin + 1e-9);
      if (kf >= 0.0 && kf < static_cast<double>(tr.y.size())) tr.y[static_cast<std::size_t>(kf)] += 1.0;
    }
    return tr;
  }

  bool record_window(RawRun& raw, RawSamples rec, double stop) {
    const std::size_t n = rec.mode == DaqMode::time_tag ? rec.tags.size() : rec.values.size();
    if (n > cfg_.daq.buffer_capacity) {
      raw.overflow = true;
      raw.log.push_back("buffer_overrun: window needs " + std::to_string(n) + " samples, buffer holds " +
                        std::to_string(cfg_.daq.buffer_capacity));
      return false;
    }
    raw.records.push_back(std::move(rec));
    raw.record_stop.push_back(stop);
    return true;
  }

  static double current_param(const CompiledSequence& seq, const detail::LaserPulse& p) {
    if (p.window < 0) return std::numeric_limits<double>::quiet_NaN();
    return seq.sweep_values[static_cast<std::size_t>(seq.readout_windows[static_cast<std::size_t>(p.window)].param)];
  }

  static void finish_signal(PulsedResult& out, const CompiledSequence& seq, const std::vector<double>& acc_sig,
                            const std::vector<double>& acc_ref, const std::vector<double>& s_sum, const std::vector<double>& s_sq,
                            const std::vector<std::int64_t>& count) {
    const int V = seq.variants, P = seq.n_params();
    out.signal.assign(static_cast<std::size_t>(V), std::vector<double>(static_cast<std::size_t>(P), std::numeric_limits<double>::quiet_NaN()));
    out.error = out.signal;
    for (int v = 0; v < V; ++v)
      for (int p = 0; p < P; ++p) {
        const auto i = static_cast<std::size_t>(v * P + p);
        const double n = static_cast<double>(count[i]);
        if (count[i] == 0) continue;
        out.signal[v][p] = acc_sig[i] / acc_ref[i];
        const double mean = s_sum[i] / n;
        const double var = n > 1 ? std::max(0.0, (s_sq[i] - n * mean * mean) / (n - 1)) : 0.0;
        out.error[v][p] = std::sqrt(var / n);
      }
  }

  /// One PN repetition or NP series is complete: update SNR and emit.
  static void group_done(PulsedResult& out, const CompiledSequence& seq, const RunConfig& run, const std::vector<double>& acc_sig,
                         const std::vector<double>& acc_ref, const std::vector<double>& s_sum, const std::vector<double>& s_sq,
                         std::size_t groups, RunContext& ctx) {
    finish_signal(out, seq, acc_sig, acc_ref, s_sum, s_sq, out.raw.accumulator);
    out.completed = static_cast<std::int64_t>(groups);
    Partial p;
    p.kind = PartialKind::pulsed;
    p.index = static_cast<int>(groups);
    const int P = seq.n_params();
    int upto = P;
    if (run.averaging == Averaging::np) upto = std::min<int>(P, static_cast<int>(groups));
    p.x.assign(seq.sweep_values.begin(), seq.sweep_values.begin() + upto);
    p.y.assign(out.signal[0].begin(), out.signal[0].begin() + upto);
    if (seq.variants > 1) p.y2.assign(out.signal[1].begin(), out.signal[1].begin() + upto);
    if (run.averaging == Averaging::pn) {
      // running SNR: spread of the averaged curve over its mean standard error
      double lo = std::numeric_limits<double>::infinity(), hi = -lo, se = 0.0;
      for (int i = 0; i < P; ++i) {
        lo = std::min(lo, out.signal[0][i]);
        hi = std::max(hi, out.signal[0][i]);
        se += out.error[0][i];
      }
      se /= P;
      const double snr = groups > 1 && se > 0.0 ? (hi - lo) / se : 0.0;
      out.snr_history.push_back(snr);
      p.snr = snr;
      p.progress = static_cast<double>(groups) / static_cast<double>(run.n_repeats);
    } else {
      p.progress = static_cast<double>(groups) / static_cast<double>(P);
    }
    ctx.emit(std::move(p));
  }

  static void finish_cw(CwResult& out, const std::vector<double>& sum, std::size_t edge) {
    const std::size_t n = sum.size();
    for (std::size_t i = 0; i < n; ++i)
      out.signal[i] = out.samples[i] > 0 ? sum[i] / out.samples[i] : std::numeric_limits<double>::quiet_NaN();
    double ref = 0.0;
    int cnt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= edge && i + edge < n) continue;
      if (out.samples[i] == 0) continue;
      ref += out.signal[i];
      ++cnt;
    }
    out.reference = cnt > 0 ? ref / cnt : std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < n; ++i) out.contrast[i] = out.signal[i] / out.reference;
  }

  LabConfig cfg_;
  instruments::MwSource mw_;
  instruments::LaserModel laser_;
  optics::OpticsReport optics_;
};

// ---------------------------------------------------------------------------
// Engine: one job at a time on a worker thread

struct Status {
  std::uint64_t run_id = 0;
  std::string label;
  State state = State::idle;
  double progress = 0.0;
  double current = 0.0;
  double snr = 0.0;
  std::string error_code;
  std::string error;
};

enum class Command { pause, resume, abort, status };

inline Command command_from_string(const std::string& s) {
  if (s == "pause") return Command::pause;
  if (s == "resume") return Command::resume;
  if (s == "abort" || s == "stop") return Command::abort;
  if (s == "status") return Command::status;
  fail(errc::argument, "unknown control command '" + s + "' (pause|resume|abort|status)");
}

class Engine {
public:
  using Job = std::function<void(RunContext&)>;
  using Subscriber = std::function<void(const Partial&)>;

  explicit Engine(std::size_t partial_capacity = 256) : partials_(partial_capacity) {}
  ~Engine() {
    {
      std::lock_guard lock(m_);
      if (ctx_) ctx_->abort();
    }
    if (worker_.joinable()) worker_.join();
  }
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  /// Start a job; busy error while another one is active.
  std::uint64_t start(std::string label, Job job, bool realtime = false) {
    std::lock_guard lock(m_);
    if (active_locked()) fail(errc::busy, "a run is already active (id " + std::to_string(status_.run_id) + ")");
    if (worker_.joinable()) worker_.join();
    const std::uint64_t id = ++next_id_;
    ctx_ = std::make_shared<RunContext>([this](const Partial& p) { publish(p); }, id);
    ctx_->set_realtime(realtime);
    status_ = Status{};
    status_.run_id = id;
    status_.label = std::move(label);
    status_.state = State::running;
    partials_.clear();
    worker_ = std::thread([this, job = std::move(job), ctx = ctx_] {
      State final_state = State::finished;
      std::string code, msg;
      try {
        job(*ctx);
        if (ctx->aborted()) final_state = State::aborted;
      } catch (const Error& e) {
        final_state = State::failed;
        code = e.code();
        msg = e.what();
      } catch (const std::exception& e) {
        final_state = State::failed;
        code = "internal";
        msg = e.what();
      }
      std::lock_guard lk(m_);
      status_.state = final_state;
      status_.progress = ctx->progress();
      status_.current = ctx->current();
      status_.snr = ctx->snr();
      status_.error_code = code;
      status_.error = msg;
      done_cv_.notify_all();
    });
    return id;
  }

  Status control(std::uint64_t handle, Command cmd) {
    std::lock_guard lock(m_);
    if (handle == 0 || handle != status_.run_id || !active_locked())
      fail(errc::stale_handle, "run " + std::to_string(handle) + " is not active");
    switch (cmd) {
      case Command::pause:
        ctx_->pause();
        status_.state = State::paused;
        break;
      case Command::resume:
        ctx_->resume();
        status_.state = State::running;
        break;
      case Command::abort:
        ctx_->abort();
        break;
      case Command::status:
        break;
    }
    return status_locked();
  }

  /// Current or most recent run; an engine that never ran reports idle.
  Status status() const {
    std::lock_guard lock(m_);
    return status_locked();
  }

  bool busy() const {
    std::lock_guard lock(m_);
    return active_locked();
  }

  /// Block until the run finishes; returns its final status.
  Status wait(std::uint64_t handle) {
    std::unique_lock lock(m_);
    if (handle != status_.run_id) fail(errc::stale_handle, "run " + std::to_string(handle) + " is unknown");
    done_cv_.wait(lock, [&] { return !active_locked(); });
    return status_locked();
  }

  std::uint64_t subscribe(Subscriber s) {
    std::lock_guard lock(sub_m_);
    subscribers_[++next_sub_] = std::move(s);
    return next_sub_;
  }
  void unsubscribe(std::uint64_t id) {
    std::lock_guard lock(sub_m_);
    subscribers_.erase(id);
  }

  const PartialBuffer& partials() const { return partials_; }

private:
  bool active_locked() const { return status_.state == State::running || status_.state == State::paused; }

  Status status_locked() const {
    Status s = status_;
    if (ctx_ && active_locked()) {
      s.progress = ctx_->progress();
      s.current = ctx_->current();
      s.snr = ctx_->snr();
    }
    return s;
  }

  void publish(const Partial& p) {
    partials_.push(p);
    std::lock_guard lock(sub_m_);
    for (auto& [id, s] : subscribers_) s(p);
  }

  mutable std::mutex m_;
  std::condition_variable done_cv_;
  Status status_;
  std::shared_ptr<RunContext> ctx_;
  std::thread worker_;
  std::uint64_t next_id_ = 0;
  PartialBuffer partials_;
  std::mutex sub_m_;
  std::map<std::uint64_t, Subscriber> subscribers_;
  std::uint64_t next_sub_ = 0;
};

}  // namespace virtlab::engine
