#pragma once

// Declarative pulse sequences -> loop-compressed pulse programs with declared
// readout windows and sync edges. Everything lives on a 1 ns grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "virtlab/error.hpp"
#include "virtlab/instruments.hpp"

namespace virtlab::sequence {

using instruments::Channel;
using instruments::Instruction;
using instruments::PulseGenConstraints;
using instruments::PulseProgram;

enum class Kind { t1, t1_alternating, rabi, ramsey, hahn_echo, pi_calibration, xy8, custom };
enum class Averaging { np, pn };
enum class SyncMethod { method1, method2 };
enum class Variant { s0, s1 };

inline const char* to_string(Kind k) {
  switch (k) {
    case Kind::t1: return "t1";
    case Kind::t1_alternating: return "t1_alternating";
    case Kind::rabi: return "rabi";
    case Kind::ramsey: return "ramsey";
    case Kind::hahn_echo: return "hahn_echo";
    case Kind::pi_calibration: return "pi_calibration";
    case Kind::xy8: return "xy8";
    case Kind::custom: return "custom";
  }
  return "?";
}
inline const char* to_string(Averaging a) { return a == Averaging::np ? "np" : "pn"; }
inline const char* to_string(SyncMethod s) { return s == SyncMethod::method1 ? "method1" : "method2"; }
inline const char* to_string(Variant v) { return v == Variant::s0 ? "s0" : "s1"; }

inline Kind kind_from_string(const std::string& s) {
  for (Kind k : {Kind::t1, Kind::t1_alternating, Kind::rabi, Kind::ramsey, Kind::hahn_echo, Kind::pi_calibration,
                 Kind::xy8, Kind::custom})
    if (s == to_string(k)) return k;
  fail(errc::spec, "unknown sequence kind '" + s + "'");
}
inline Averaging averaging_from_string(const std::string& s) {
  if (s == "np") return Averaging::np;
  if (s == "pn") return Averaging::pn;
  fail(errc::spec, "unknown averaging '" + s + "' (np|pn)");
}
inline SyncMethod sync_from_string(const std::string& s) {
  if (s == "method1") return SyncMethod::method1;
  if (s == "method2") return SyncMethod::method2;
  fail(errc::spec, "unknown sync method '" + s + "' (method1|method2)");
}

/// Round to the 1 ns grid, ties toward the earlier tick.
inline std::int64_t snap(double seconds) {
  return static_cast<std::int64_t>(std::ceil(seconds * 1e9 - 0.5));
}
inline double seconds(std::int64_t ns) { return static_cast<double>(ns) * 1e-9; }

struct Fixed {
  double laser_pulse_len = 3e-6;    // leading polarization pulse (PN)
  double readout_len = 3e-6;
  double init_wait = 1e-6;          // singlet relaxation before MW
  double mw_readout_wait = 100e-9;  // last MW pulse -> readout laser
  double pi_len = 0.0;              // 0: not provided
  double pi_half_len = 0.0;         // 0: pi_len / 2
  double echo_delay = 500e-9;       // fixed free evolution of the calibration echo
  double mw_detuning_phase = 0.0;   // rad, phase of the first MW pulse
  double period = 0.0;              // laser-to-laser gap budget for constant_period (0: auto)
  double sync_pulse_len = 10e-9;
  double series_idle = 10e-6;       // between N-blocks / series

  double half() const { return pi_half_len > 0.0 ? pi_half_len : pi_len / 2.0; }
};

struct Options {
  bool constant_period = false;
  bool alternate_final_3pi2 = true;
  int xy8_order = 1;
};

struct Pulse {
  Channel channel = instruments::ch_laser;
  std::int64_t start = 0;
  std::int64_t stop = 0;
  double phase = 0.0;

  bool operator==(const Pulse&) const = default;
};

struct Window {
  std::int64_t start = 0;
  std::int64_t stop = 0;
  int param = 0;
  Variant variant = Variant::s0;

  bool operator==(const Window&) const = default;
};

enum class BlockRole { lead, param, series_start, series_end };

inline const char* to_string(BlockRole r) {
  switch (r) {
    case BlockRole::lead: return "lead";
    case BlockRole::param: return "param";
    case BlockRole::series_start: return "series_start";
    case BlockRole::series_end: return "series_end";
  }
  return "?";
}

/// One program block with its timing, relative to the block start.
struct Block {
  BlockRole role = BlockRole::param;
  int param = -1;
  std::int64_t duration = 0;
  std::int64_t repeat = 1;
  std::vector<Pulse> pulses;  // sorted by (start, channel)
  std::vector<Window> windows;
  std::vector<std::int64_t> sync;  // rising edges of sync pulses

  bool operator==(const Block&) const = default;
};

struct SequenceSpec {
  Kind kind = Kind::rabi;
  std::vector<double> sweep_values;  // s
  Fixed fixed;
  Options options;
  std::vector<Block> custom_blocks;  // Kind::custom: one param block each
};

/// Absolute readout window over the full run.
struct ReadoutWindow {
  std::int64_t start = 0;
  std::int64_t stop = 0;
  int param = 0;
  Variant variant = Variant::s0;
  std::int64_t repetition = 0;
  std::int64_t series = 0;

  bool operator==(const ReadoutWindow&) const = default;
};

struct CompiledSequence {
  Kind kind = Kind::rabi;
  std::vector<double> sweep_values;
  Averaging averaging = Averaging::np;
  SyncMethod sync_method = SyncMethod::method2;
  std::int64_t n_repeats = 1;
  int variants = 1;
  PulseProgram program;
  std::vector<Block> blocks;  // parallel to program.blocks
  std::vector<ReadoutWindow> readout_windows;
  std::vector<std::int64_t> sync_edges;
  std::int64_t total_duration = 0;  // ns

  int n_params() const { return static_cast<int>(sweep_values.size()); }
  bool operator==(const CompiledSequence&) const = default;
};

// ---------------------------------------------------------------------------
// build

inline bool needs_pi(Kind k) {
  return k == Kind::t1_alternating || k == Kind::ramsey || k == Kind::hahn_echo || k == Kind::xy8;
}

inline SequenceSpec build(Kind kind, std::vector<double> sweep, Fixed fixed = {}, Options options = {}) {
  if (sweep.empty()) fail(errc::spec, "sequence needs at least one sweep value (P >= 1)");
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    if (!(sweep[i] >= 0.0) || !std::isfinite(sweep[i])) fail(errc::spec, "sweep values must be finite and >= 0");
    if (i && !(sweep[i] > sweep[i - 1])) fail(errc::spec, "sweep values must be strictly increasing");
  }
  if (needs_pi(kind) && !(fixed.pi_len > 0.0))
    fail(errc::spec, std::string("sequence '") + to_string(kind) + "' needs a pi pulse length (pi_len)");
  if (kind == Kind::xy8 && options.xy8_order < 1) fail(errc::spec, "xy8_order must be >= 1");
  for (double v : {fixed.laser_pulse_len, fixed.readout_len})
    if (!(v > 0.0)) fail(errc::spec, "laser pulse lengths must be > 0");
  for (double v : {fixed.init_wait, fixed.mw_readout_wait, fixed.echo_delay, fixed.series_idle, fixed.period})
    if (!(v >= 0.0)) fail(errc::spec, "waits must be >= 0");
  if (!(fixed.sync_pulse_len > 0.0)) fail(errc::spec, "sync_pulse_len must be > 0");
  if (kind == Kind::custom) fail(errc::spec, "custom sequences are built from blocks (build_custom)");
  SequenceSpec s;
  s.kind = kind;
  s.sweep_values = std::move(sweep);
  s.fixed = fixed;
  s.options = options;
  return s;
}

/// Custom sequence: each block is one parameter point (windows inside it).
inline SequenceSpec build_custom(std::vector<Block> blocks, Fixed fixed = {}) {
  if (blocks.empty()) fail(errc::spec, "custom sequence needs at least one block");
  SequenceSpec s;
  s.kind = Kind::custom;
  s.fixed = fixed;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].windows.empty()) fail(errc::spec, "custom block without a readout window");
    s.sweep_values.push_back(static_cast<double>(i));
  }
  s.custom_blocks = std::move(blocks);
  return s;
}

// ---------------------------------------------------------------------------
// compile

namespace detail {

struct MwPulse {
  double start;  // s from manipulation start
  double len;
  double phase;
};

struct Manipulation {
  std::vector<MwPulse> pulses;
  double duration = 0.0;
  bool dark_only = false;  // t1: no init wait, the dark time is the parameter
};

inline Manipulation manipulation(const SequenceSpec& s, double x, Variant v) {
  const auto& f = s.fixed;
  const double ph = f.mw_detuning_phase;
  Manipulation m;
  auto add = [&](double start, double len, double phase) {
    if (len > 0.0) m.pulses.push_back({start, len, phase});
  };
  switch (s.kind) {
    case Kind::t1:
      m.dark_only = true;
      m.duration = x;
      break;
    case Kind::t1_alternating:
      // fixed pi slot in both variants so the laser sees the same dark time
      m.dark_only = true;
      if (v == Variant::s1) add(x, f.pi_len, ph);
      m.duration = x + f.pi_len;
      break;
    case Kind::rabi:
      add(0.0, x, ph);
      m.duration = x;
      break;
    case Kind::ramsey: {
      const double h = f.half();
      add(0.0, h, ph);
      add(h + x, h, ph);
      m.duration = 2 * h + x;
      break;
    }
    case Kind::hahn_echo: {
      const double h = f.half();
      add(0.0, h, ph);
      add(h + x / 2, f.pi_len, ph);
      add(h + x / 2 + f.pi_len + x / 2, h, ph);
      m.duration = 2 * h + f.pi_len + x;
      break;
    }
    case Kind::pi_calibration: {
      const double h = x / 2;
      const double tau = f.echo_delay;
      const double last = v == Variant::s1 ? 3 * h : h;
      add(0.0, h, ph);
      add(h + tau / 2, x, ph);
      add(h + tau / 2 + x + tau / 2, last, ph);
      m.duration = h + x + tau + last;
      break;
    }
    case Kind::xy8: {
      const double h = f.half();
      const int n = 8 * s.options.xy8_order;
      const double gap = x / n;
      static constexpr int pattern[8] = {0, 1, 0, 1, 1, 0, 1, 0};  // X Y X Y Y X Y X
      add(0.0, h, ph);
      double t = h + gap / 2;
      for (int k = 0; k < n; ++k) {
        add(t, f.pi_len, ph + pattern[k % 8] * std::numbers::pi / 2);
        t += f.pi_len + gap;
      }
      t -= gap / 2;
      add(t, h, ph);
      m.duration = t + h;
      break;
    }
    case Kind::custom:
      break;
  }
  return m;
}

inline std::vector<Variant> variants(const SequenceSpec& s) {
  if (s.kind == Kind::t1_alternating) return {Variant::s0, Variant::s1};
  if (s.kind == Kind::pi_calibration && s.options.alternate_final_3pi2) return {Variant::s0, Variant::s1};
  return {Variant::s0};
}

inline void sort_pulses(std::vector<Pulse>& p) {
  std::stable_sort(p.begin(), p.end(), [](const Pulse& a, const Pulse& b) {
    if (a.start != b.start) return a.start < b.start;
    return a.channel < b.channel;
  });
}

}  // namespace detail

/// Laser-to-laser dark gap of a parameter block segment (ns).
inline std::int64_t segment_gap(const SequenceSpec& s, double x, Variant v) {
  const auto m = detail::manipulation(s, x, v);
  if (m.dark_only) return snap(m.duration) + (s.kind == Kind::t1_alternating ? snap(s.fixed.mw_readout_wait) : 0);
  return snap(s.fixed.init_wait) + snap(m.duration) + snap(s.fixed.mw_readout_wait);
}

/// Instructions for a block: one per interval between consecutive edges.
inline std::vector<Instruction> to_instructions(const Block& b) {
  std::vector<std::int64_t> edges{0, b.duration};
  for (const auto& p : b.pulses) {
    edges.push_back(p.start);
    edges.push_back(p.stop);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  std::vector<Instruction> out;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    const std::int64_t a = edges[i], z = edges[i + 1];
    if (a < 0 || z > b.duration) continue;
    Instruction ins;
    ins.duration_ns = z - a;
    for (const auto& p : b.pulses) {
      if (p.start <= a && p.stop >= z) {
        ins.mask |= instruments::bit(p.channel);
        if (p.channel == instruments::ch_mw) ins.phase = p.phase;
      }
    }
    if (!out.empty() && out.back().mask == ins.mask && out.back().phase == ins.phase)
      out.back().duration_ns += ins.duration_ns;
    else
      out.push_back(ins);
  }
  return out;
}

namespace detail {

inline Block param_block(const SequenceSpec& s, int index, SyncMethod sync, std::int64_t pad_to_gap) {
  const auto& f = s.fixed;
  const double x = s.sweep_values[static_cast<std::size_t>(index)];
  Block b;
  b.role = BlockRole::param;
  b.param = index;
  std::int64_t t = 0;
  for (Variant v : variants(s)) {
    const auto m = manipulation(s, x, v);
    const std::int64_t gap = segment_gap(s, x, v);
    const std::int64_t pad = pad_to_gap >= 0 ? pad_to_gap - gap : 0;
    const std::int64_t manip_start = t + (m.dark_only ? 0 : snap(f.init_wait)) + pad;
    for (const auto& p : m.pulses) {
      const std::int64_t a = manip_start + snap(p.start);
      b.pulses.push_back({instruments::ch_mw, a, a + snap(p.len), p.phase});
    }
    const std::int64_t l0 = t + gap + pad;
    const std::int64_t l1 = l0 + snap(f.readout_len);
    b.pulses.push_back({instruments::ch_laser, l0, l1, 0.0});
    b.windows.push_back({l0, l1, index, v});
    if (sync == SyncMethod::method2) {
      b.pulses.push_back({instruments::ch_sync, l0, l0 + snap(f.sync_pulse_len), 0.0});
      b.sync.push_back(l0);
    }
    t = l1;
  }
  b.duration = t;
  sort_pulses(b.pulses);
  return b;
}

inline Block lead_block(const SequenceSpec& s) {
  Block b;
  b.role = BlockRole::lead;
  b.duration = snap(s.fixed.laser_pulse_len);
  b.pulses.push_back({instruments::ch_laser, 0, b.duration, 0.0});
  return b;
}

inline Block series_block(const SequenceSpec& s, BlockRole role, SyncMethod sync) {
  Block b;
  b.role = role;
  const std::int64_t w = snap(s.fixed.sync_pulse_len);
  if (sync == SyncMethod::method1) {
    b.pulses.push_back({instruments::ch_sync, 0, w, 0.0});
    b.sync.push_back(0);
  }
  b.duration = 2 * w;
  if (role == BlockRole::series_end) b.duration = std::max(b.duration, snap(s.fixed.series_idle));
  return b;
}

}  // namespace detail

/// Fill readout_windows, sync_edges and total_duration from the blocks. A
/// series is one PN repetition, or one parameter's N-block under NP.
inline void expand(CompiledSequence& c) {
  c.readout_windows.clear();
  c.sync_edges.clear();
  std::int64_t t = 0;
  std::int64_t np_series = -1;
  for (std::int64_t r = 0; r < c.program.repetitions; ++r) {
    for (const auto& b : c.blocks) {
      if (b.role == BlockRole::param) ++np_series;
      const std::int64_t series = c.averaging == Averaging::pn ? r : std::max<std::int64_t>(np_series, 0);
      for (std::int64_t k = 0; k < b.repeat; ++k) {
        const std::int64_t rep = c.averaging == Averaging::pn ? r : k;
        for (const auto& w : b.windows) c.readout_windows.push_back({t + w.start, t + w.stop, w.param, w.variant, rep, series});
        for (auto e : b.sync) c.sync_edges.push_back(t + e);
        t += b.duration;
      }
    }
  }
  c.total_duration = t;
}

inline CompiledSequence compile(const SequenceSpec& spec, const PulseGenConstraints& hw, SyncMethod sync,
                                Averaging averaging, std::int64_t n_repeats) {
  if (n_repeats < 1) fail(errc::spec, "n_repeats must be >= 1");
  if (spec.sweep_values.empty()) fail(errc::spec, "sequence has no parameter points");
  CompiledSequence c;
  c.kind = spec.kind;
  c.sweep_values = spec.sweep_values;
  c.averaging = averaging;
  c.sync_method = sync;
  c.n_repeats = n_repeats;
  c.variants = static_cast<int>(detail::variants(spec).size());

  std::int64_t pad_gap = -1;
  if (spec.options.constant_period) {
    if (spec.kind == Kind::t1 || spec.kind == Kind::t1_alternating)
      fail(errc::constraint, "constant_period is impossible for t1: the dark time is the swept parameter");
    if (spec.kind == Kind::custom) fail(errc::constraint, "constant_period is not available for custom sequences");
    for (double x : spec.sweep_values)
      for (Variant v : detail::variants(spec)) pad_gap = std::max(pad_gap, segment_gap(spec, x, v));
    if (spec.fixed.period > 0.0) {
      if (snap(spec.fixed.period) < pad_gap)
        fail(errc::constraint, "constant_period impossible: longest gap " + std::to_string(pad_gap) +
                                   " ns exceeds the period budget " + std::to_string(snap(spec.fixed.period)) + " ns");
      pad_gap = snap(spec.fixed.period);
    }
  }

  std::vector<Block> params;
  for (int i = 0; i < c.n_params(); ++i) {
    if (spec.kind == Kind::custom) {
      Block b = spec.custom_blocks[static_cast<std::size_t>(i)];
      b.role = BlockRole::param;
      b.param = i;
      for (auto& w : b.windows) w.param = i;
      b.repeat = 1;
      b.sync.clear();
      std::erase_if(b.pulses, [](const Pulse& p) { return p.channel == instruments::ch_sync; });
      if (sync == SyncMethod::method2) {
        for (const auto& w : b.windows) {
          b.pulses.push_back({instruments::ch_sync, w.start, w.start + snap(spec.fixed.sync_pulse_len), 0.0});
          b.sync.push_back(w.start);
        }
      }
      detail::sort_pulses(b.pulses);
      params.push_back(std::move(b));
    } else {
      params.push_back(detail::param_block(spec, i, sync, pad_gap));
    }
  }

  const bool with_start = sync == SyncMethod::method1;
  const bool with_end = sync == SyncMethod::method1 || spec.fixed.series_idle > 0.0;
  if (averaging == Averaging::pn) {
    if (with_start) c.blocks.push_back(detail::series_block(spec, BlockRole::series_start, sync));
    c.blocks.push_back(detail::lead_block(spec));
    for (auto& b : params) c.blocks.push_back(std::move(b));
    if (with_end) c.blocks.push_back(detail::series_block(spec, BlockRole::series_end, sync));
    c.program.repetitions = n_repeats;
  } else {
    for (auto& b : params) {
      if (with_start) c.blocks.push_back(detail::series_block(spec, BlockRole::series_start, sync));
      b.repeat = n_repeats;
      c.blocks.push_back(std::move(b));
      if (with_end) c.blocks.push_back(detail::series_block(spec, BlockRole::series_end, sync));
    }
    c.program.repetitions = 1;
  }

  std::ostringstream bad;
  for (std::size_t bi = 0; bi < c.blocks.size(); ++bi) {
    const auto& b = c.blocks[bi];
    for (const auto& p : b.pulses) {
      if (p.stop - p.start < hw.min_pulse_ns)
        bad << " block " << bi << ' ' << c.program.channels[p.channel] << " pulse [" << p.start << ", " << p.stop
            << ") shorter than " << hw.min_pulse_ns << " ns;";
    }
    instruments::ProgramBlock pb;
    pb.instructions = to_instructions(b);
    pb.repeat = b.repeat;
    for (std::size_t k = 0; k < pb.instructions.size(); ++k)
      if (pb.instructions[k].duration_ns < hw.min_pulse_ns)
        bad << " block " << bi << " instruction " << k << " lasts " << pb.instructions[k].duration_ns << " ns;";
    c.program.blocks.push_back(std::move(pb));
  }
  if (!bad.str().empty()) fail(errc::constraint, "pulse width violation:" + bad.str());
  if (c.program.instruction_count() > hw.max_instructions)
    fail(errc::constraint, "program needs " + std::to_string(c.program.instruction_count()) + " instructions, hardware max " +
                               std::to_string(hw.max_instructions));
  expand(c);
  return c;
}

// ---------------------------------------------------------------------------
// validate: independent re-check working from the instruction stream

struct Finding {
  std::string code;  // width, capacity, overlap, collision, window, sync, count, duration
  std::string message;
};

struct ValidationReport {
  std::vector<Finding> findings;
  bool ok() const { return findings.empty(); }
  bool has(const std::string& code) const {
    return std::any_of(findings.begin(), findings.end(), [&](const Finding& f) { return f.code == code; });
  }
};

inline ValidationReport validate(const CompiledSequence& seq, const PulseGenConstraints& hw) {
  ValidationReport rep;
  auto add = [&](const char* code, const std::string& msg) { rep.findings.push_back({code, msg}); };
  if (seq.program.instruction_count() > hw.max_instructions)
    add("capacity", std::to_string(seq.program.instruction_count()) + " instructions exceed max " +
                        std::to_string(hw.max_instructions));
  if (seq.program.blocks.size() != seq.blocks.size()) add("count", "program/timing block count mismatch");

  for (std::size_t bi = 0; bi < seq.program.blocks.size(); ++bi) {
    const auto& pb = seq.program.blocks[bi];
    std::int64_t t = 0;
    // on-segments per channel from the instruction stream
    std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> seg(4);
    for (std::size_t k = 0; k < pb.instructions.size(); ++k) {
      const auto& ins = pb.instructions[k];
      if (ins.duration_ns < hw.min_pulse_ns)
        add("width", "block " + std::to_string(bi) + " instruction " + std::to_string(k) + " is " +
                         std::to_string(ins.duration_ns) + " ns");
      if ((ins.mask & instruments::bit(instruments::ch_laser)) && (ins.mask & instruments::bit(instruments::ch_mw)))
        add("collision", "block " + std::to_string(bi) + ": MW and laser on together at " + std::to_string(t) + " ns");
      for (unsigned c = 0; c < 4; ++c) {
        if (ins.mask & (1u << c)) {
          if (!seg[c].empty() && seg[c].back().second == t)
            seg[c].back().second = t + ins.duration_ns;
          else
            seg[c].push_back({t, t + ins.duration_ns});
        }
      }
      t += ins.duration_ns;
    }
    for (unsigned c = 0; c < 4; ++c)
      for (const auto& [a, z] : seg[c])
        if (z - a < hw.min_pulse_ns)
          add("width", "block " + std::to_string(bi) + " channel " + std::to_string(c) + " pulse of " +
                           std::to_string(z - a) + " ns");
    if (bi < seq.blocks.size()) {
      const auto& b = seq.blocks[bi];
      if (t != b.duration) add("duration", "block " + std::to_string(bi) + " instruction time != declared duration");
      for (std::size_t i = 0; i < b.pulses.size(); ++i)
        for (std::size_t j = i + 1; j < b.pulses.size(); ++j) {
          const auto& p = b.pulses[i];
          const auto& q = b.pulses[j];
          if (p.channel == q.channel && p.start < q.stop && q.start < p.stop)
            add("collision", "block " + std::to_string(bi) + ": overlapping pulses on one channel");
        }
      for (const auto& w : b.windows) {
        const bool inside = std::any_of(seg[0].begin(), seg[0].end(), [&](auto s) { return s.first <= w.start && w.stop <= s.second; });
        if (!inside) add("window", "block " + std::to_string(bi) + ": readout window not covered by a laser pulse");
      }
    }
  }

  for (std::size_t i = 0; i < seq.readout_windows.size(); ++i) {
    const auto& w = seq.readout_windows[i];
    if (w.stop <= w.start) add("window", "empty readout window " + std::to_string(i));
    if (i && w.start < seq.readout_windows[i - 1].stop)
      add("overlap", "readout windows " + std::to_string(i - 1) + " and " + std::to_string(i) + " overlap or are unsorted");
  }
  const std::int64_t expected = static_cast<std::int64_t>(seq.n_params()) * seq.n_repeats * seq.variants;
  if (static_cast<std::int64_t>(seq.readout_windows.size()) != expected)
    add("count", std::to_string(seq.readout_windows.size()) + " readout windows, expected " + std::to_string(expected));

  if (seq.sync_method == SyncMethod::method2) {
    if (seq.sync_edges.size() != seq.readout_windows.size()) add("sync", "method2 needs one sync edge per readout pulse");
    for (std::size_t i = 0; i < std::min(seq.sync_edges.size(), seq.readout_windows.size()); ++i)
      if (seq.sync_edges[i] != seq.readout_windows[i].start) {
        add("sync", "sync edge " + std::to_string(i) + " not at its readout pulse start");
        break;
      }
  } else {
    const std::int64_t series =
        seq.averaging == Averaging::pn ? seq.n_repeats : static_cast<std::int64_t>(seq.n_params());
    if (static_cast<std::int64_t>(seq.sync_edges.size()) != 2 * series)
      add("sync", "method1 needs exactly two sync edges per series");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Text format

inline std::string fmt17(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void render(std::ostream& os, const CompiledSequence& c) {
  os << "# virtlab pulse sequence v1\n";
  os << "kind " << to_string(c.kind) << '\n';
  os << "P " << c.n_params() << '\n';
  os << "N " << c.n_repeats << '\n';
  os << "averaging " << to_string(c.averaging) << '\n';
  os << "sync " << to_string(c.sync_method) << '\n';
  os << "variants " << c.variants << '\n';
  os << "repetitions " << c.program.repetitions << '\n';
  os << "sweep";
  for (double v : c.sweep_values) os << ' ' << fmt17(v);
  os << '\n';
  for (std::size_t i = 0; i < c.blocks.size(); ++i) {
    const auto& b = c.blocks[i];
    os << "block " << i << ' ' << to_string(b.role) << " param=" << b.param << " repeat=" << b.repeat
       << " duration=" << b.duration << '\n';
    for (const auto& p : b.pulses) {
      os << c.program.channels[p.channel] << ' ' << p.start << ' ' << p.stop;
      if (p.channel == instruments::ch_mw) os << " phase=" << fmt17(p.phase);
      os << '\n';
    }
    for (const auto& w : b.windows)
      os << "window " << w.start << ' ' << w.stop << " param=" << w.param << " variant=" << to_string(w.variant) << '\n';
    for (auto e : b.sync) os << "sync_edge " << e << '\n';
    os << "end\n";
  }
}

inline std::string render(const CompiledSequence& c) {
  std::ostringstream os;
  render(os, c);
  return os.str();
}

namespace detail {
inline std::string kv(const std::string& tok, const std::string& key, int line) {
  if (tok.rfind(key + "=", 0) != 0) fail(errc::parse, "line " + std::to_string(line) + ": expected " + key + "=...");
  return tok.substr(key.size() + 1);
}
inline std::int64_t to_i64(const std::string& s, int line) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (...) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) fail(errc::parse, "line " + std::to_string(line) + ": bad integer '" + s + "'");
  return v;
}
inline double to_f64(const std::string& s, int line) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (...) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) fail(errc::parse, "line " + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}
}  // namespace detail

/// Parse the text format back into a CompiledSequence (instructions are
/// regenerated from the pulse lists, then the run is expanded).
inline CompiledSequence parse(std::istream& is) {
  using detail::kv;
  using detail::to_f64;
  using detail::to_i64;
  CompiledSequence c;
  std::string line;
  int ln = 0;
  Block* cur = nullptr;
  bool have_kind = false;
  std::int64_t declared_p = -1;
  while (std::getline(is, line)) {
    ++ln;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<std::string> t;
    for (std::string w; ls >> w;) t.push_back(w);
    if (t.empty()) continue;
    const std::string& key = t[0];
    auto need = [&](std::size_t n) {
      if (t.size() != n) fail(errc::parse, "line " + std::to_string(ln) + ": '" + key + "' expects " + std::to_string(n - 1) + " field(s)");
    };
    if (cur) {
      if (key == "end") {
        cur = nullptr;
      } else if (key == "window") {
        need(5);
        Window w{to_i64(t[1], ln), to_i64(t[2], ln), static_cast<int>(to_i64(kv(t[3], "param", ln), ln)), Variant::s0};
        const auto v = kv(t[4], "variant", ln);
        if (v == "s1") w.variant = Variant::s1;
        else if (v != "s0") fail(errc::parse, "line " + std::to_string(ln) + ": variant must be s0|s1");
        cur->windows.push_back(w);
      } else if (key == "sync_edge") {
        need(2);
        cur->sync.push_back(to_i64(t[1], ln));
      } else {
        const auto& ch = c.program.channels;
        const auto it = std::find(ch.begin(), ch.end(), key);
        if (it == ch.end()) fail(errc::parse, "line " + std::to_string(ln) + ": unknown channel '" + key + "'");
        if (t.size() != 3 && t.size() != 4) fail(errc::parse, "line " + std::to_string(ln) + ": pulse needs start stop [phase=]");
        Pulse p{static_cast<Channel>(it - ch.begin()), to_i64(t[1], ln), to_i64(t[2], ln), 0.0};
        if (t.size() == 4) p.phase = to_f64(kv(t[3], "phase", ln), ln);
        if (p.stop <= p.start) fail(errc::parse, "line " + std::to_string(ln) + ": pulse stop must follow start");
        cur->pulses.push_back(p);
      }
      continue;
    }
    if (key == "kind") {
      need(2);
      c.kind = kind_from_string(t[1]);
      have_kind = true;
    } else if (key == "P") {
      need(2);
      declared_p = to_i64(t[1], ln);
      if (declared_p < 0) fail(errc::parse, "line " + std::to_string(ln) + ": P must be non-negative");
    } else if (key == "N") {
      need(2);
      c.n_repeats = to_i64(t[1], ln);
    } else if (key == "averaging") {
      need(2);
      c.averaging = averaging_from_string(t[1]);
    } else if (key == "sync") {
      need(2);
      c.sync_method = sync_from_string(t[1]);
    } else if (key == "variants") {
      need(2);
      c.variants = static_cast<int>(to_i64(t[1], ln));
    } else if (key == "repetitions") {
      need(2);
      c.program.repetitions = to_i64(t[1], ln);
    } else if (key == "sweep") {
      for (std::size_t i = 1; i < t.size(); ++i) c.sweep_values.push_back(to_f64(t[i], ln));
    } else if (key == "block") {
      need(6);
      Block b;
      const std::string role = t[2];
      if (role == "lead") b.role = BlockRole::lead;
      else if (role == "param") b.role = BlockRole::param;
      else if (role == "series_start") b.role = BlockRole::series_start;
      else if (role == "series_end") b.role = BlockRole::series_end;
      else fail(errc::parse, "line " + std::to_string(ln) + ": unknown block role '" + role + "'");
      b.param = static_cast<int>(to_i64(kv(t[3], "param", ln), ln));
      b.repeat = to_i64(kv(t[4], "repeat", ln), ln);
      b.duration = to_i64(kv(t[5], "duration", ln), ln);
      if (b.repeat < 1 || b.duration < 0) fail(errc::parse, "line " + std::to_string(ln) + ": bad block header");
      c.blocks.push_back(b);
      cur = &c.blocks.back();
    } else {
      fail(errc::parse, "line " + std::to_string(ln) + ": unknown directive '" + key + "'");
    }
  }
  if (cur) fail(errc::parse, "unterminated block at end of input");
  if (!have_kind) fail(errc::parse, "missing 'kind' header");
  if (declared_p >= 0 && declared_p != c.n_params())
    fail(errc::parse, "P " + std::to_string(declared_p) + " disagrees with " + std::to_string(c.n_params()) + " sweep value(s)");
  for (const auto& b : c.blocks) {
    instruments::ProgramBlock pb;
    pb.instructions = to_instructions(b);
    pb.repeat = b.repeat;
    c.program.blocks.push_back(std::move(pb));
  }
  expand(c);
  return c;
}

inline CompiledSequence parse(const std::string& text) {
  std::istringstream is(text);
  return parse(is);
}

}  // namespace virtlab::sequence
