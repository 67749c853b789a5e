#pragma once

// Damped least squares (Levenberg-Marquardt) with a central-difference
// Jacobian, plus the three lab models and their automatic initialisation.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "virtlab/error.hpp"

namespace virtlab::dsp {

enum class Model { lorentzian_multi, exp_decay, damped_cosine };

inline const char* to_string(Model m) {
  switch (m) {
    case Model::lorentzian_multi: return "lorentzian_multi";
    case Model::exp_decay: return "exp_decay";
    case Model::damped_cosine: return "damped_cosine";
  }
  return "?";
}

inline Model model_from_string(const std::string& s) {
  if (s == "lorentzian_multi" || s == "lorentzian") return Model::lorentzian_multi;
  if (s == "exp_decay" || s == "exp") return Model::exp_decay;
  if (s == "damped_cosine" || s == "cosine") return Model::damped_cosine;
  fail(errc::argument, "unknown fit model '" + s + "' (lorentzian_multi|exp_decay|damped_cosine)");
}

inline constexpr int kMaxDips = 12;

struct FitOptions {
  std::optional<std::vector<double>> init;  // model parameter vector (see param_names)
  int max_iterations = 200;
  bool stretched = false;                    // exp_decay: free stretch exponent
  int max_dips = kMaxDips;
  const std::atomic<bool>* cancel = nullptr;
};

struct FitResult {
  Model model = Model::exp_decay;
  std::vector<std::string> names;
  std::vector<double> params;
  std::vector<double> errors;  // sqrt(diag(cov)) proxy
  double residual_rms = 0.0;
  bool converged = false;
  bool cancelled = false;
  int iterations = 0;

  double get(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return params[i];
    fail(errc::argument, "fit result has no parameter '" + name + "'");
  }
  bool has(const std::string& name) const { return std::find(names.begin(), names.end(), name) != names.end(); }
  int n_dips() const { return model == Model::lorentzian_multi ? static_cast<int>((params.size() - 1) / 3) : 0; }
};

// ---------------------------------------------------------------------------
// Models (physical parameters)

/// y = b * (1 - sum a_i / (1 + ((x - c_i) / (w_i / 2))^2)); p = [b, c0, w0, a0, ...]
inline double lorentzian_multi(double x, const std::vector<double>& p) {
  double dip = 0.0;
  for (std::size_t i = 1; i + 2 < p.size(); i += 3) {
    const double u = (x - p[i]) / (0.5 * p[i + 1]);
    dip += p[i + 2] / (1.0 + u * u);
  }
  return p[0] * (1.0 - dip);
}

/// y = A exp(-(x/T)^beta) + c; p = [A, T, c] or [A, T, c, beta]
inline double exp_decay(double x, const std::vector<double>& p) {
  const double beta = p.size() > 3 ? p[3] : 1.0;
  const double r = x / p[1];
  return p[0] * std::exp(beta == 1.0 ? -r : -std::pow(std::abs(r), beta)) + p[2];
}

/// y = A exp(-x/tau) cos(2 pi f x + phi) + c; p = [A, f, phi, tau, c]
inline double damped_cosine(double x, const std::vector<double>& p) {
  return p[0] * std::exp(-x / p[3]) * std::cos(2.0 * std::numbers::pi * p[1] * x + p[2]) + p[4];
}

inline double evaluate(Model m, double x, const std::vector<double>& p) {
  switch (m) {
    case Model::lorentzian_multi: return lorentzian_multi(x, p);
    case Model::exp_decay: return exp_decay(x, p);
    case Model::damped_cosine: return damped_cosine(x, p);
  }
  return 0.0;
}

inline std::vector<std::string> param_names(Model m, std::size_t n_params) {
  switch (m) {
    case Model::lorentzian_multi: {
      std::vector<std::string> n{"baseline"};
      for (std::size_t i = 0; i < (n_params - 1) / 3; ++i) {
        n.push_back("center_" + std::to_string(i));
        n.push_back("fwhm_" + std::to_string(i));
        n.push_back("contrast_" + std::to_string(i));
      }
      return n;
    }
    case Model::exp_decay:
      if (n_params > 3) return {"amplitude", "T", "offset", "beta"};
      return {"amplitude", "T", "offset"};
    case Model::damped_cosine: return {"amplitude", "frequency", "phase", "decay", "offset"};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt core on normalised data

struct LmOutcome {
  Eigen::VectorXd p;
  Eigen::VectorXd errors;
  double ssr = 0.0;
  bool converged = false;
  bool cancelled = false;
  int iterations = 0;
};

/// Minimise sum (y - f(x, p))^2. `f` evaluates the whole model vector.
inline LmOutcome levenberg_marquardt(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                     const Eigen::VectorXd& y, Eigen::VectorXd p, int max_iter,
                                     const std::atomic<bool>* cancel = nullptr) {
  const Eigen::Index n = y.size(), m = p.size();
  auto ssr_of = [&](const Eigen::VectorXd& q) {
    const Eigen::VectorXd r = y - f(q);
    const double s = r.squaredNorm();
    return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
  };
  LmOutcome out;
  double s = ssr_of(p);
  double lambda = 1e-3;
  Eigen::MatrixXd J(n, m);
  Eigen::MatrixXd A(m, m);
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    if (cancel && cancel->load()) {
      out.cancelled = true;
      break;
    }
    if (s == 0.0) {
      out.converged = true;
      break;
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      const double h = 1e-6 * std::max(std::abs(p[j]), 1e-3);
      Eigen::VectorXd a = p, b = p;
      a[j] += h;
      b[j] -= h;
      J.col(j) = (f(a) - f(b)) / (2.0 * h);
    }
    const Eigen::VectorXd r = y - f(p);
    A = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    Eigen::VectorXd d = A.diagonal();
    const double dmax = std::max(d.maxCoeff(), 1e-300);
    for (Eigen::Index j = 0; j < m; ++j) d[j] = std::max(d[j], 1e-12 * dmax);
    bool accepted = false;
    bool done = false;
    while (lambda < 1e16) {
      Eigen::MatrixXd M = A;
      M.diagonal() += lambda * d;
      const Eigen::VectorXd step = M.ldlt().solve(g);
      const Eigen::VectorXd q = p + step;
      const double sq = ssr_of(q);
      if (step.allFinite() && sq < s) {
        const double rel = (s - sq) / s;
        const bool tiny = step.norm() < 1e-10 * (p.norm() + 1e-10);
        p = q;
        s = sq;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        done = rel < 1e-9 || tiny;
        break;
      }
      if (step.allFinite() && step.norm() < 1e-10 * (p.norm() + 1e-10)) {
        done = true;  // no decrease possible at machine resolution
        break;
      }
      lambda *= 10.0;
    }
    if (done || !accepted) {
      out.converged = true;
      break;
    }
  }
  out.p = p;
  out.ssr = s;
  // covariance proxy
  for (Eigen::Index j = 0; j < m; ++j) {
    const double h = 1e-6 * std::max(std::abs(p[j]), 1e-3);
    Eigen::VectorXd a = p, b = p;
    a[j] += h;
    b[j] -= h;
    J.col(j) = (f(a) - f(b)) / (2.0 * h);
  }
  const double dof = std::max<double>(1.0, static_cast<double>(n - m));
  const Eigen::MatrixXd cov = (J.transpose() * J).completeOrthogonalDecomposition().pseudoInverse() * (s / dof);
  out.errors = cov.diagonal().cwiseAbs().cwiseSqrt();
  return out;
}

// ---------------------------------------------------------------------------
// Automatic initialisation

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
  return m;
}

/// Robust white-noise estimate from first differences (MAD).
inline double noise_sigma(const std::vector<double>& y) {
  if (y.size() < 3) return 0.0;
  std::vector<double> d;
  for (std::size_t i = 1; i < y.size(); ++i) d.push_back(y[i] - y[i - 1]);
  const double med = median(d);
  for (double& v : d) v = std::abs(v - med);
  return 1.4826 * median(d) / std::sqrt(2.0);
}

inline std::vector<double> moving_average(const std::vector<double>& y, int half) {
  std::vector<double> out(y.size());
  const auto n = static_cast<std::ptrdiff_t>(y.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto a = std::max<std::ptrdiff_t>(0, i - half), b = std::min(n - 1, i + half);
    double s = 0.0;
    for (auto k = a; k <= b; ++k) s += y[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(b - a + 1);
  }
  return out;
}

inline std::vector<double> init_lorentzian(const std::vector<double>& x, const std::vector<double>& y, int max_dips) {
  const double base = median(y);
  const double noise = noise_sigma(y);
  const auto sm = moving_average(y, 2);
  const double thr = base - 2.0 * noise;
  const auto n = sm.size();
  struct Seed {
    std::size_t i;
    double depth;
  };
  std::vector<Seed> seeds;
  for (std::size_t i = 0; i < n; ++i) {
    if (sm[i] >= thr) continue;
    bool is_min = true;
    for (std::size_t k = (i >= 3 ? i - 3 : 0); k <= std::min(n - 1, i + 3); ++k)
      if (sm[k] < sm[i] || (sm[k] == sm[i] && k < i)) is_min = false;
    if (is_min) seeds.push_back({i, base - sm[i]});
  }
  // A shallower minimum is its own dip only if the signal climbs back by at
  // least half its depth on the way to every deeper dip already taken.
  std::vector<double> p{base};
  std::sort(seeds.begin(), seeds.end(), [](const Seed& a, const Seed& b) { return a.depth > b.depth; });
  std::vector<std::size_t> taken;
  for (const auto& s : seeds) {
    if (static_cast<int>(taken.size()) >= max_dips) break;
    bool separate = true;
    for (auto j : taken) {
      const auto lo = std::min(j, s.i), hi = std::max(j, s.i);
      const double ridge = *std::max_element(sm.begin() + static_cast<std::ptrdiff_t>(lo),
                                             sm.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
      if (ridge - sm[s.i] < 0.5 * s.depth) separate = false;
    }
    if (!separate) continue;
    taken.push_back(s.i);
    const double half = base - 0.5 * s.depth;
    std::size_t l = s.i, r = s.i;
    while (l > 0 && sm[l] < half) --l;
    while (r + 1 < n && sm[r] < half) ++r;
    double w = x[r] - x[l];
    if (!(w > 0.0)) w = (x.back() - x.front()) / 50.0;
    p.push_back(x[s.i]);
    p.push_back(w);
    p.push_back(s.depth / base);
  }
  std::vector<double> sorted{p[0]};
  std::vector<std::size_t> order;
  for (std::size_t i = 1; i < p.size(); i += 3) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  for (auto i : order) sorted.insert(sorted.end(), {p[i], p[i + 1], p[i + 2]});
  return sorted;
}

inline std::vector<double> init_exp(const std::vector<double>& x, const std::vector<double>& y, bool stretched) {
  const std::size_t n = x.size();
  const std::size_t tail = std::max<std::size_t>(2, n / 10);
  double c = 0.0;
  for (std::size_t i = n - tail; i < n; ++i) c += y[i];
  c /= static_cast<double>(tail);
  const double sign = (y.front() - c) >= 0.0 ? 1.0 : -1.0;
  double amax = 0.0;
  for (double v : y) amax = std::max(amax, sign * (v - c));
  // log-linear regression on points clearly above the tail level
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = sign * (y[i] - c);
    if (d > 0.05 * amax) {
      const double ly = std::log(d);
      sx += x[i];
      sy += ly;
      sxx += x[i] * x[i];
      sxy += x[i] * ly;
      ++k;
    }
  }
  const double span = x.back() - x.front();
  double T = span / 3.0;
  double A = sign * amax;
  if (k >= 2) {
    const double den = k * sxx - sx * sx;
    if (den != 0.0) {
      const double slope = (k * sxy - sx * sy) / den;
      const double icpt = (sy - slope * sx) / k;
      if (slope < 0.0) {
        T = -1.0 / slope;
        A = sign * std::exp(icpt);
      }
    }
  }
  if (!(T > 0.0) || !std::isfinite(T)) T = span / 3.0;
  std::vector<double> p{A, T, c};
  if (stretched) p.push_back(1.0);
  return p;
}

/// Linear least squares of y on the given basis columns.
inline Eigen::VectorXd linear_fit(const Eigen::MatrixXd& B, const Eigen::VectorXd& y, double* ssr) {
  const Eigen::VectorXd c = B.colPivHouseholderQr().solve(y);
  if (ssr) *ssr = (y - B * c).squaredNorm();
  return c;
}

inline std::vector<double> init_cosine(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  const double span = x.back() - x.front();
  double dxmin = span;
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > x[i - 1]) dxmin = std::min(dxmin, x[i] - x[i - 1]);
  const double fmax = 0.5 / dxmin;
  const double df = 1.0 / (4.0 * span);  // 4x oversampled discrete spectrum
  double best_f = 1.0 / span, best_pow = -1.0;
  for (double f = df; f <= fmax; f += df) {
    if (f < 0.75 / span) continue;  // skip the near-DC bins
    double c = 0.0, s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ph = 2.0 * std::numbers::pi * f * x[i];
      c += (y[i] - mean) * std::cos(ph);
      s += (y[i] - mean) * std::sin(ph);
    }
    const double pw = c * c + s * s;
    if (pw > best_pow) {
      best_pow = pw;
      best_f = f;
    }
  }
  // amplitude, phase, offset and decay by linear fits over a decay ladder
  double best_ssr = std::numeric_limits<double>::infinity();
  std::vector<double> best{0.0, best_f, 0.0, span, mean};
  for (double tau_scale : {0.1, 0.2, 0.4, 0.7, 1.0, 2.0, 5.0, 20.0}) {
    const double tau = tau_scale * span;
    Eigen::MatrixXd B(static_cast<Eigen::Index>(n), 3);
    Eigen::VectorXd Y(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const double e = std::exp(-(x[i] - x.front()) / tau) * std::exp(-x.front() / tau);
      const double ph = 2.0 * std::numbers::pi * best_f * x[i];
      const auto r = static_cast<Eigen::Index>(i);
      B(r, 0) = e * std::cos(ph);
      B(r, 1) = e * std::sin(ph);
      B(r, 2) = 1.0;
      Y[r] = y[i];
    }
    double ssr = 0.0;
    const auto c = linear_fit(B, Y, &ssr);
    if (ssr < best_ssr) {
      best_ssr = ssr;
      // a cos + b sin = A cos(ph + phi) with A = hypot(a, b), phi = atan2(-b, a)
      best = {std::hypot(c[0], c[1]), best_f, std::atan2(-c[1], c[0]), tau, c[2]};
    }
  }
  return best;
}

inline double wrap_phase(double phi) {
  phi = std::remainder(phi, 2.0 * std::numbers::pi);
  if (phi <= -std::numbers::pi) phi += 2.0 * std::numbers::pi;
  return phi;
}

}  // namespace detail

inline void check_fit_data(const std::vector<double>& x, const std::vector<double>& y, std::size_t n_params) {
  if (x.size() != y.size()) fail(errc::data, "fit: x and y lengths differ");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) fail(errc::data, "fit: non-finite data");
  std::vector<double> u = x;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  if (u.size() < 3) fail(errc::data, "fit: x spans fewer than 3 unique values");
  if (x.size() < n_params + 2)
    fail(errc::data, "fit: need at least " + std::to_string(n_params + 2) + " points, got " + std::to_string(x.size()));
}

/// Fit `model` to (x, y). Data are rescaled internally (x to unit span, y to
/// unit magnitude) so the damping works on well-conditioned parameters.
inline FitResult fit(Model model, const std::vector<double>& x_in, const std::vector<double>& y_in,
                     const FitOptions& opt = {}) {
  if (x_in.size() != y_in.size()) fail(errc::data, "fit: x and y lengths differ");
  // sort by x so initialisers can assume order
  std::vector<std::size_t> idx(x_in.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x_in[a] < x_in[b]; });
  std::vector<double> x, y;
  for (auto i : idx) {
    x.push_back(x_in[i]);
    y.push_back(y_in[i]);
  }
  check_fit_data(x, y, model == Model::exp_decay ? 3 : model == Model::damped_cosine ? 5 : 4);

  std::vector<double> p0;
  if (opt.init) {
    p0 = *opt.init;
  } else {
    switch (model) {
      case Model::lorentzian_multi: p0 = detail::init_lorentzian(x, y, opt.max_dips); break;
      case Model::exp_decay: p0 = detail::init_exp(x, y, opt.stretched); break;
      case Model::damped_cosine: p0 = detail::init_cosine(x, y); break;
    }
  }
  if (model == Model::lorentzian_multi) {
    if (p0.empty() || (p0.size() - 1) % 3 != 0) fail(errc::argument, "lorentzian init must be [b, (c, w, a)...]");
    if (static_cast<int>((p0.size() - 1) / 3) > opt.max_dips)
      fail(errc::argument, "more than " + std::to_string(opt.max_dips) + " dips requested");
  }
  if (model == Model::exp_decay && p0.size() != 3 && p0.size() != 4) fail(errc::argument, "exp_decay init needs 3 or 4 values");
  if (model == Model::damped_cosine && p0.size() != 5) fail(errc::argument, "damped_cosine init needs 5 values");
  check_fit_data(x, y, p0.size());

  // normalisation
  const double x_lo = x.front(), x_span = x.back() - x.front();
  const bool shift_x = model == Model::lorentzian_multi;
  const double xo = shift_x ? x_lo : 0.0;
  const double xs = x_span;
  double ys = 0.0;
  for (double v : y) ys = std::max(ys, std::abs(v));
  if (ys == 0.0) ys = 1.0;
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::VectorXd xn(n), yn(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    xn[i] = (x[static_cast<std::size_t>(i)] - xo) / xs;
    yn[i] = y[static_cast<std::size_t>(i)] / ys;
  }
  // physical <-> normalised parameter maps
  auto to_norm = [&](const std::vector<double>& p) {
    Eigen::VectorXd q(static_cast<Eigen::Index>(p.size()));
    for (std::size_t i = 0; i < p.size(); ++i) q[static_cast<Eigen::Index>(i)] = p[i];
    switch (model) {
      case Model::lorentzian_multi:
        q[0] /= ys;
        for (Eigen::Index i = 1; i < q.size(); i += 3) {
          q[i] = (q[i] - xo) / xs;
          q[i + 1] /= xs;
        }
        break;
      case Model::exp_decay:
        q[0] /= ys;
        q[1] /= xs;
        q[2] /= ys;
        break;
      case Model::damped_cosine:
        q[0] /= ys;
        q[1] *= xs;
        q[3] /= xs;
        q[4] /= ys;
        break;
    }
    return q;
  };
  auto to_phys = [&](const Eigen::VectorXd& q, std::vector<double>* err_in, const Eigen::VectorXd* eq) {
    std::vector<double> p(static_cast<std::size_t>(q.size()));
    std::vector<double> e(p.size(), 0.0);
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      p[static_cast<std::size_t>(i)] = q[i];
      if (eq) e[static_cast<std::size_t>(i)] = (*eq)[i];
    }
    switch (model) {
      case Model::lorentzian_multi:
        p[0] *= ys;
        e[0] *= ys;
        for (std::size_t i = 1; i < p.size(); i += 3) {
          p[i] = p[i] * xs + xo;
          e[i] *= xs;
          p[i + 1] = std::abs(p[i + 1]) * xs;
          e[i + 1] *= xs;
        }
        break;
      case Model::exp_decay:
        p[0] *= ys;
        e[0] *= ys;
        p[1] = std::abs(p[1]) * xs;
        e[1] *= xs;
        p[2] *= ys;
        e[2] *= ys;
        break;
      case Model::damped_cosine:
        p[0] *= ys;
        e[0] *= ys;
        p[1] /= xs;
        e[1] /= xs;
        p[3] *= xs;
        e[3] *= xs;
        p[4] *= ys;
        e[4] *= ys;
        if (p[1] < 0.0) {
          p[1] = -p[1];
          p[2] = -p[2];
        }
        if (p[0] < 0.0) {
          p[0] = -p[0];
          p[2] += std::numbers::pi;
        }
        p[2] = detail::wrap_phase(p[2]);
        break;
    }
    if (err_in) *err_in = e;
    return p;
  };

  auto fn = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd out(n);
    std::vector<double> pv(q.data(), q.data() + q.size());
    if (model == Model::exp_decay && pv[1] == 0.0) pv[1] = 1e-300;
    if (model == Model::damped_cosine && pv[3] == 0.0) pv[3] = 1e-300;
    for (Eigen::Index i = 0; i < n; ++i) out[i] = evaluate(model, xn[i], pv);
    return out;
  };

  const auto lm = levenberg_marquardt(fn, yn, to_norm(p0), opt.max_iterations, opt.cancel);
  FitResult r;
  r.model = model;
  r.params = to_phys(lm.p, &r.errors, &lm.errors);
  r.names = param_names(model, r.params.size());
  r.residual_rms = std::sqrt(lm.ssr / static_cast<double>(n)) * ys;
  r.converged = lm.converged && std::isfinite(r.residual_rms);
  r.cancelled = lm.cancelled;
  r.iterations = lm.iterations;
  if (model == Model::lorentzian_multi) {
    // report dips in ascending centre order
    const std::size_t k = (r.params.size() - 1) / 3;
    std::vector<std::size_t> ord(k);
    std::iota(ord.begin(), ord.end(), 0);
    std::sort(ord.begin(), ord.end(), [&](auto a, auto b) { return r.params[1 + 3 * a] < r.params[1 + 3 * b]; });
    std::vector<double> p{r.params[0]}, e{r.errors[0]};
    for (auto i : ord)
      for (int j = 0; j < 3; ++j) {
        p.push_back(r.params[1 + 3 * i + j]);
        e.push_back(r.errors[1 + 3 * i + j]);
      }
    r.params = p;
    r.errors = e;
  }
  return r;
}

inline std::vector<double> evaluate(const FitResult& r, const std::vector<double>& x) {
  std::vector<double> out;
  out.reserve(x.size());
  for (double v : x) out.push_back(evaluate(r.model, v, r.params));
  return out;
}

}  // namespace virtlab::dsp
