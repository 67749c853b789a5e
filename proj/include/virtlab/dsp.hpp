#pragma once

// Pulse extraction, window integration, common-mode rejection and the
// pi-pulse calibration reduction. Fitting lives in fit.hpp.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "virtlab/error.hpp"
#include "virtlab/fit.hpp"

namespace virtlab::dsp {

/// Uniformly sampled trace; sample i covers [t0 + i*dt, t0 + (i+1)*dt).
struct Trace {
  double t0 = 0.0;
  double dt = 1e-9;
  std::vector<double> y;

  double t_end() const { return t0 + dt * static_cast<double>(y.size()); }
};

enum class ExtractionMethod { threshold, gaussian_derivative };

inline const char* to_string(ExtractionMethod m) {
  return m == ExtractionMethod::threshold ? "threshold" : "gaussian_derivative";
}

inline ExtractionMethod extraction_method_from_string(const std::string& s) {
  if (s == "threshold") return ExtractionMethod::threshold;
  if (s == "gaussian" || s == "gaussian_derivative") return ExtractionMethod::gaussian_derivative;
  fail(errc::argument, "unknown extraction method '" + s + "' (threshold|gaussian_derivative)");
}

struct ExtractionConfig {
  ExtractionMethod method = ExtractionMethod::gaussian_derivative;
  double threshold_level = 0.5;
  double sigma = 50e-9;
  double min_pulse_gap = 0.0;

  void validate() const {
    if (!(threshold_level > 0.0 && threshold_level < 1.0)) fail(errc::argument, "threshold_level must be in (0, 1)");
    if (!(sigma > 0.0)) fail(errc::argument, "sigma must be > 0");
    if (!(min_pulse_gap >= 0.0)) fail(errc::argument, "min_pulse_gap must be >= 0");
  }
};

struct PulseEdges {
  double rise = 0.0;
  double fall = 0.0;
  bool operator==(const PulseEdges&) const = default;
};

struct Extraction {
  std::vector<PulseEdges> pulses;
  std::vector<std::string> warnings;
  std::vector<double> derivative;  // S_p on the half-sample grid (gaussian only)
};

namespace detail {

/// Pair rise/fall edge candidates (already time-sorted) into pulses.
inline void pair_edges(const std::vector<std::pair<double, bool>>& edges, double min_gap, Extraction& out) {
  bool pending = false;
  double rise = 0.0;
  bool seen_any = false;
  for (const auto& [t, is_rise] : edges) {
    if (is_rise) {
      pending = true;
      rise = t;
    } else if (pending) {
      if (t - rise >= min_gap) {
        out.pulses.push_back({rise, t});
        pending = false;
      }
    } else if (!seen_any) {
      out.warnings.push_back("boundary: trace starts inside a pulse (fall without rise)");
    }
    seen_any = true;
  }
  if (pending) out.warnings.push_back("boundary: trace ends inside a pulse (rise without fall)");
}

/// Normalised Gaussian kernel truncated at +-4 sigma.
inline std::vector<double> gaussian_kernel(double sigma_samples) {
  const int half = static_cast<int>(std::ceil(4.0 * sigma_samples));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    const double v = std::exp(-0.5 * (i / sigma_samples) * (i / sigma_samples));
    k[static_cast<std::size_t>(i + half)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Convolution with edge replication (output length = input length).
inline std::vector<double> convolve_same(const std::vector<double>& y, const std::vector<double>& k) {
  const auto n = static_cast<std::ptrdiff_t>(y.size());
  const auto half = static_cast<std::ptrdiff_t>(k.size() / 2);
  std::vector<double> out(y.size(), 0.0);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::ptrdiff_t j = -half; j <= half; ++j) {
      const auto idx = std::clamp<std::ptrdiff_t>(i - j, 0, n - 1);
      acc += k[static_cast<std::size_t>(j + half)] * y[static_cast<std::size_t>(idx)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

/// Sub-sample vertex offset of a parabola through three points, in [-0.5, 0.5].
inline double parabolic_offset(double a, double b, double c) {
  const double den = a - 2.0 * b + c;
  if (den == 0.0) return 0.0;
  return std::clamp(0.5 * (a - c) / den, -0.5, 0.5);
}

}  // namespace detail

inline Extraction extract_threshold(const Trace& tr, const ExtractionConfig& cfg) {
  Extraction out;
  if (tr.y.size() < 2) return out;
  const auto [mn, mx] = std::minmax_element(tr.y.begin(), tr.y.end());
  const double range = *mx - *mn;
  if (!(range > 0.0)) return out;
  const double up = *mn + cfg.threshold_level * range;
  const double down = up - 0.1 * range;
  std::vector<std::pair<double, bool>> edges;
  bool high = tr.y[0] >= up;
  if (high) out.warnings.push_back("boundary: trace starts inside a pulse (fall without rise)");
  // crossing time by linear interpolation; sample i is taken at its centre
  auto at = [&](std::size_t i, double level) {
    const double a = tr.y[i - 1], b = tr.y[i];
    const double f = (b == a) ? 0.5 : (level - a) / (b - a);
    return tr.t0 + tr.dt * (static_cast<double>(i) - 0.5 + f);
  };
  bool skip_first_fall = high;
  for (std::size_t i = 1; i < tr.y.size(); ++i) {
    if (!high && tr.y[i] >= up && tr.y[i - 1] < up) {
      high = true;
      edges.push_back({at(i, up), true});
    } else if (high && tr.y[i] < down) {
      high = false;
      if (skip_first_fall) {
        skip_first_fall = false;
        continue;
      }
      edges.push_back({at(i, down), false});
    }
  }
  detail::pair_edges(edges, cfg.min_pulse_gap, out);
  return out;
}

inline Extraction extract_gaussian(const Trace& tr, const ExtractionConfig& cfg, bool keep_derivative = false) {
  Extraction out;
  const double s = cfg.sigma / tr.dt;
  if (s < 2.0) fail(errc::argument, "gaussian extraction needs sigma >= 2 sample periods");
  if (tr.y.size() < 3) return out;
  const auto c = detail::convolve_same(tr.y, detail::gaussian_kernel(s));
  std::vector<double> d(c.size() - 1);
  for (std::size_t i = 0; i + 1 < c.size(); ++i) d[i] = c[i + 1] - c[i];
  double dmax = 0.0;
  for (double v : d) dmax = std::max(dmax, std::abs(v));
  if (keep_derivative) out.derivative = d;
  // a perfectly flat trace (up to rounding) has no edges
  const auto [mn, mx] = std::minmax_element(tr.y.begin(), tr.y.end());
  if (!(dmax > 0.0) || !(*mx - *mn > 0.0)) return out;
  const double thr = cfg.threshold_level * dmax;
  std::vector<std::pair<double, bool>> edges;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double prev = i > 0 ? d[i - 1] : -INFINITY;
    const double next = i + 1 < d.size() ? d[i + 1] : -INFINITY;
    const double prevn = i > 0 ? d[i - 1] : INFINITY;
    const double nextn = i + 1 < d.size() ? d[i + 1] : INFINITY;
    // d[i] sits between samples i and i+1: time t0 + (i + 1) * dt at sample centres
    if (d[i] >= thr && d[i] > prev && d[i] >= next) {
      const double off = (i > 0 && i + 1 < d.size()) ? detail::parabolic_offset(d[i - 1], d[i], d[i + 1]) : 0.0;
      edges.push_back({tr.t0 + tr.dt * (static_cast<double>(i) + 1.0 + off), true});
    } else if (-d[i] >= thr && d[i] < prevn && d[i] <= nextn) {
      const double off = (i > 0 && i + 1 < d.size()) ? detail::parabolic_offset(d[i - 1], d[i], d[i + 1]) : 0.0;
      edges.push_back({tr.t0 + tr.dt * (static_cast<double>(i) + 1.0 + off), false});
    }
  }
  detail::pair_edges(edges, cfg.min_pulse_gap, out);
  return out;
}

/// Locate laser pulses in a detector trace.
inline Extraction extract_pulses(const Trace& tr, const ExtractionConfig& cfg, bool keep_derivative = false) {
  cfg.validate();
  if (!(tr.dt > 0.0)) fail(errc::argument, "trace sample period must be > 0");
  return cfg.method == ExtractionMethod::threshold ? extract_threshold(tr, cfg) : extract_gaussian(tr, cfg, keep_derivative);
}

// ---------------------------------------------------------------------------

struct WindowPlan {
  double signal_start = 0.0;  // relative to the pulse rise
  double signal_stop = 300e-9;
  double reference_start = 2.0e-6;
  double reference_stop = 2.9e-6;

  void validate() const {
    if (!(signal_start >= 0.0 && signal_stop > signal_start)) fail(errc::argument, "signal window must satisfy 0 <= start < stop");
    if (!(reference_stop > reference_start)) fail(errc::argument, "reference window must satisfy start < stop");
    if (reference_start < signal_stop) fail(errc::argument, "signal window must precede the reference window");
  }
};

/// Integral of the sample-and-hold trace over [a, b).
inline double integrate(const Trace& tr, double a, double b) {
  if (b <= a || tr.y.empty()) return 0.0;
  const double fa = (a - tr.t0) / tr.dt, fb = (b - tr.t0) / tr.dt;
  const auto n = static_cast<std::ptrdiff_t>(tr.y.size());
  auto i0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(fa)));
  const auto i1 = std::min<std::ptrdiff_t>(n - 1, static_cast<std::ptrdiff_t>(std::ceil(fb)) - 1);
  double acc = 0.0;
  for (auto i = i0; i <= i1; ++i) {
    const double lo = std::max(fa, static_cast<double>(i));
    const double hi = std::min(fb, static_cast<double>(i + 1));
    if (hi > lo) acc += tr.y[static_cast<std::size_t>(i)] * (hi - lo);
  }
  return acc * tr.dt;
}

/// Per-pulse early-window mean over late-window mean.
inline std::vector<double> integrate_normalize(const Trace& tr, const std::vector<PulseEdges>& windows, const WindowPlan& plan) {
  plan.validate();
  std::vector<double> out;
  out.reserve(windows.size());
  const double sig_len = plan.signal_stop - plan.signal_start;
  const double ref_len = plan.reference_stop - plan.reference_start;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& w = windows[k];
    if (w.fall - w.rise < plan.reference_stop * (1.0 - 1e-12))
      fail(errc::window, "pulse " + std::to_string(k) + " is shorter than the window plan (" +
                             std::to_string(w.fall - w.rise) + " s < " + std::to_string(plan.reference_stop) + " s)");
    const double sig = integrate(tr, w.rise + plan.signal_start, w.rise + plan.signal_stop);
    const double ref = integrate(tr, w.rise + plan.reference_start, w.rise + plan.reference_stop);
    out.push_back((sig / sig_len) / (ref / ref_len));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct CommonMode {
  std::vector<double> difference;
  std::vector<double> normalized;
};

inline CommonMode common_mode_reject(const std::vector<double>& s0, const std::vector<double>& s1) {
  if (s0.size() != s1.size())
    fail(errc::pairing, "common-mode rejection needs equal lengths (" + std::to_string(s0.size()) + " vs " +
                            std::to_string(s1.size()) + ")");
  CommonMode r;
  for (std::size_t i = 0; i < s0.size(); ++i) {
    r.difference.push_back(s0[i] - s1[i]);
    const double sum = s0[i] + s1[i];
    r.normalized.push_back(sum == 0.0 ? 0.0 : (s0[i] - s1[i]) / sum);
  }
  return r;
}

// ---------------------------------------------------------------------------

struct PiCalibration {
  double optimum = 0.0;            // argmax of the smoothed contrast (grid value)
  double refined = 0.0;            // parabolic refinement between neighbours
  std::size_t index = 0;
  double argmax_half = 0.0;
  double argmin_3half = 0.0;
  bool disagreement = false;
  std::vector<double> smoothed;    // smoothed echo_half - echo_3half
};

inline PiCalibration pi_calibration_analysis(const std::vector<double>& taus, const std::vector<double>& half,
                                             const std::vector<double>& three_half) {
  if (taus.size() != half.size() || taus.size() != three_half.size())
    fail(errc::data, "pi calibration: taus and echo lists must be aligned");
  if (taus.size() < 5) fail(errc::data, "pi calibration needs at least 5 points");
  for (std::size_t i = 1; i < taus.size(); ++i)
    if (!(taus[i] > taus[i - 1])) fail(errc::data, "pi calibration: taus must be strictly increasing");
  const std::size_t n = taus.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = half[i] - three_half[i];
  PiCalibration r;
  r.smoothed = detail::moving_average(diff, 1);
  r.index = static_cast<std::size_t>(std::max_element(r.smoothed.begin(), r.smoothed.end()) - r.smoothed.begin());
  r.optimum = taus[r.index];
  r.refined = r.optimum;
  if (r.index > 0 && r.index + 1 < n) {
    const double off = detail::parabolic_offset(r.smoothed[r.index - 1], r.smoothed[r.index], r.smoothed[r.index + 1]);
    r.refined = off >= 0 ? r.optimum + off * (taus[r.index + 1] - r.optimum)
                         : r.optimum + off * (r.optimum - taus[r.index - 1]);
  }
  const auto ih = static_cast<std::size_t>(std::max_element(half.begin(), half.end()) - half.begin());
  const auto i3 = static_cast<std::size_t>(std::min_element(three_half.begin(), three_half.end()) - three_half.begin());
  r.argmax_half = taus[ih];
  r.argmin_3half = taus[i3];
  r.disagreement = (ih > i3 ? ih - i3 : i3 - ih) > 1;
  return r;
}

}  // namespace virtlab::dsp
