#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "virtlab/spin_model.hpp"

using namespace virtlab;
using namespace virtlab::spin;

namespace {

constexpr double kPi = std::numbers::pi;

NVEnsembleParams ideal() {
  NVEnsembleParams p;
  p.t1 = kInf;
  p.t2 = kInf;
  p.t2_star = kInf;
  return p;
}

SpinState ground() { return SpinState{0.0, 0.0, 1.0, 0.0}; }

}  // namespace

TEST(Resonances, ZeroFieldSingleLine) {
  const auto lines = resonance_frequencies(NVEnsembleParams{}, BiasField{{0, 0, 0}});
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_DOUBLE_EQ(lines[0].frequency, 2.87e9);
  EXPECT_DOUBLE_EQ(lines[0].weight, 1.0);
}

TEST(Resonances, AxialOneMillitesla) {
  NVEnsembleParams p;
  const Vec3 b = p.orientations[0] * 1e-3;
  const auto lines = resonance_frequencies(p, BiasField{b});
  ASSERT_EQ(lines.size(), 4u);
  // 28 GHz/T * 1 mT = 28 MHz on axis, 28/3 MHz on the other three axes.
  const double expect[4] = {2.842e9, 2.87e9 - 28e6 / 3, 2.87e9 + 28e6 / 3, 2.898e9};
  const double weight[4] = {0.125, 0.375, 0.375, 0.125};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(lines[i].frequency, expect[i], 1.0);
    EXPECT_DOUBLE_EQ(lines[i].weight, weight[i]);
  }
  EXPECT_NEAR(lines[1].frequency, 2.86067e9, 5e3);
  EXPECT_NEAR(lines[2].frequency, 2.87933e9, 5e3);
}

TEST(Resonances, GenericFieldGivesEightLines) {
  NVEnsembleParams p;
  const Vec3 dir{0.9, 0.35, 0.1};
  const auto lines = resonance_frequencies(p, BiasField{dir * (1e-3 / dir.norm())});
  ASSERT_EQ(lines.size(), 8u);
  double total = 0.0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    total += lines[i].weight;
    if (i) { EXPECT_GT(lines[i].frequency, lines[i - 1].frequency); }
  }
  EXPECT_DOUBLE_EQ(total, 1.0);
}

TEST(Resonances, PermutationInvariant) {
  NVEnsembleParams p;
  const BiasField b{{3e-4, -7e-4, 2e-4}};
  const auto ref = resonance_frequencies(p, b);
  auto perm = p;
  std::array<int, 4> idx{0, 1, 2, 3};
  while (std::next_permutation(idx.begin(), idx.end())) {
    for (int i = 0; i < 4; ++i) perm.orientations[i] = p.orientations[idx[i]];
    const auto got = resonance_frequencies(perm, b);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_DOUBLE_EQ(got[i].frequency, ref[i].frequency);
      EXPECT_DOUBLE_EQ(got[i].weight, ref[i].weight);
    }
  }
}

TEST(Resonances, SecularGuard) {
  NVEnsembleParams p;
  try {
    resonance_frequencies(p, BiasField{{0.06, 0, 0}});  // 1.68 GHz > D/2
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::model_validity);
  }
}

TEST(Params, Validation) {
  NVEnsembleParams p;
  EXPECT_NO_THROW(p.validate());
  auto bad = p;
  bad.t2 = 7e-3;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.t2_star = 40e-6;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.tau_pol = 50e-9;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.orientations[1] = Vec3{1, 0, 0};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(CwSpectrum, ZeroPowerWidthIsDephasingLimit) {
  NVEnsembleParams p;
  const ResonanceLine line{2.87e9, 0, Transition::minus, 0.125};
  const auto l = cw_line(p, line, 1.0, p.cw_laser_rate_opt);
  EXPECT_NEAR(l.fwhm, 318.31e3, 1e3);
  EXPECT_NEAR(l.fwhm, 1.0 / (kPi * p.t2_star), 1e-3);
}

TEST(CwSpectrum, UnsaturatedPowerScaling) {
  NVEnsembleParams p;
  const ResonanceLine line{2.87e9, 0, Transition::minus, 0.125};
  const auto a = cw_line(p, line, 2e3, p.cw_laser_rate_opt);
  const auto b = cw_line(p, line, 4e3, p.cw_laser_rate_opt);
  EXPECT_NEAR(b.contrast / a.contrast, 4.0, 0.01);
  EXPECT_LE(b.fwhm / a.fwhm, std::sqrt(1.0 + b.saturation));
}

TEST(CwSpectrum, BestPerLineContrastAroundTwoPercent) {
  NVEnsembleParams p;
  const Vec3 dir{0.9, 0.35, 0.1};
  const BiasField b{dir * (1e-3 / dir.norm())};
  double best = 0.0;
  for (double rabi = 1e5; rabi <= 1e7; rabi *= 1.5) {
    for (double rate = 1e5; rate <= 1e7; rate *= 1.3) {
      for (const auto& line : resonance_frequencies(p, b)) best = std::max(best, cw_line(p, line, rabi, rate).contrast);
    }
  }
  EXPECT_GT(best, 0.015);
  EXPECT_LT(best, 0.025);
}

TEST(CwSpectrum, DipsAtResonances) {
  NVEnsembleParams p;
  const BiasField b{p.orientations[0] * 1e-3};
  std::vector<double> grid;
  for (double f = 2.83e9; f <= 2.91e9; f += 1e5) grid.push_back(f);
  const auto spec = cw_spectrum(p, b, 9e5, p.cw_laser_rate_opt, grid);
  ASSERT_EQ(spec.relative_pl.size(), grid.size());
  for (const auto& l : spec.lines) {
    const auto it = std::min_element(grid.begin(), grid.end(),
                                     [&](double x, double y) { return std::abs(x - l.center) < std::abs(y - l.center); });
    const std::size_t i = static_cast<std::size_t>(it - grid.begin());
    EXPECT_LT(spec.relative_pl[i], spec.relative_pl[i - 5]);
    EXPECT_LT(spec.relative_pl[i], spec.relative_pl[i + 5]);
  }
  EXPECT_THROW(cw_spectrum(p, b, 1e6, 1e6, std::vector<double>{}), Error);
}

TEST(CwSpectrum, LaserFactorUnimodal) {
  NVEnsembleParams p;
  double prev = 0.0;
  bool falling = false;
  for (double rate = 1e4; rate < 1e8; rate *= 1.2) {
    const double f = cw_laser_factor(p, rate);
    if (f < prev) falling = true;
    if (falling) { EXPECT_LE(f, prev); }
    prev = f;
  }
  EXPECT_TRUE(falling);
  EXPECT_DOUBLE_EQ(cw_laser_factor(p, p.cw_laser_rate_opt), 1.0);
}

TEST(MwPulse, PiPulseOnResonance) {
  const auto p = ideal();
  const auto s = apply_mw_pulse(ground(), p, 2 * kPi * 5e6, 0.0, 100e-9, 0.0);
  EXPECT_LE(std::abs(s.w + 1.0), 1e-6);
}

TEST(MwPulse, ZeroDurationIsIdentity) {
  const SpinState s{0.3, -0.2, 0.5, 0.1};
  const auto out = apply_mw_pulse(s, NVEnsembleParams{}, 1e7, 1e6, 0.0, 0.4);
  EXPECT_EQ(out.u, s.u);
  EXPECT_EQ(out.v, s.v);
  EXPECT_EQ(out.w, s.w);
}

TEST(MwPulse, TwoHalfPulsesMakeOnePi) {
  const auto p = ideal();
  const double rabi = 2 * kPi * 3e6;
  const double t_pi = kPi / rabi;
  const SpinState s0{0.2, 0.3, 0.6, 0.0};
  auto a = apply_mw_pulse(apply_mw_pulse(s0, p, rabi, 0.0, t_pi / 2, 0.7), p, rabi, 0.0, t_pi / 2, 0.7);
  auto b = apply_mw_pulse(s0, p, rabi, 0.0, t_pi, 0.7);
  EXPECT_NEAR(a.u, b.u, 1e-12);
  EXPECT_NEAR(a.v, b.v, 1e-12);
  EXPECT_NEAR(a.w, b.w, 1e-12);
}

TEST(MwPulse, AreaEquivalence) {
  const auto p = ideal();
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    const double rabi = 1e6 + 1e8 * U(g);
    const double t = 1e-9 + 1e-6 * U(g);
    const double phase = 2 * kPi * U(g);
    const SpinState s0{0.1, -0.4, 0.5, 0.0};
    const auto a = apply_mw_pulse(s0, p, rabi, 0.0, t, phase);
    const auto b = apply_mw_pulse(s0, p, 2 * rabi, 0.0, t / 2, phase);
    EXPECT_NEAR(a.u, b.u, 1e-9);
    EXPECT_NEAR(a.v, b.v, 1e-9);
    EXPECT_NEAR(a.w, b.w, 1e-9);
  }
}

TEST(FreeEvolution, PhaseAdvance) {
  const auto p = ideal();
  const auto s = propagate_free(SpinState{0.0, 1.0, 0.0, 0.0}, p, 250e-9, 2e6);
  EXPECT_NEAR(s.v, -1.0, 1e-12);
  EXPECT_NEAR(s.u, 0.0, 1e-12);
  const SpinState x{0.3, -0.2, 0.5, 0.1};
  const auto same = propagate_free(x, NVEnsembleParams{}, 0.0, 1e6);
  EXPECT_EQ(same.u, x.u);
  EXPECT_EQ(same.shelf, x.shelf);
}

TEST(FreeEvolution, RelaxesToEquilibrium) {
  NVEnsembleParams p;
  auto s = propagate_free(SpinState{0.4, 0.3, -0.8, 0.2}, p, 100 * p.t1, 1e5);
  EXPECT_NEAR(s.u, 0.0, 1e-12);
  EXPECT_NEAR(s.v, 0.0, 1e-12);
  EXPECT_NEAR(s.shelf, 0.0, 1e-12);
  EXPECT_NEAR(s.w, p.thermal_polarization, 1e-12);
  p.thermal_polarization = 1.0;
  s = propagate_free(SpinState{0.0, 0.0, -1.0, 0.0}, p, 100 * p.t1, 0.0);
  EXPECT_NEAR(s.w, 1.0, 1e-12);
}

TEST(FreeEvolution, ShelfDrainsIntoGround) {
  NVEnsembleParams p;
  const SpinState s{0.0, 0.0, 0.8, 0.2};
  const auto out = propagate_free(s, p, p.tau_singlet, 0.0);
  EXPECT_NEAR(out.shelf, 0.2 * std::exp(-1.0), 1e-12);
  // T1 barely acts over 200 ns: w picks up what left the shelf.
  EXPECT_NEAR(out.w, 0.8 + 0.2 * (1 - std::exp(-1.0)), 1e-4);
}

TEST(Invariants, BlochNormNeverExceedsOne) {
  NVEnsembleParams p;
  std::mt19937_64 g(11);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    SpinState s = ground();
    for (int k = 0; k < 6; ++k) {
      const int op = static_cast<int>(U(g) * 3);
      if (op == 0) s = apply_mw_pulse(s, p, 1e8 * U(g), 4e6 * (U(g) - 0.5), 5e-7 * U(g), 6.3 * U(g));
      else if (op == 1) s = propagate_free(s, p, 1e-5 * U(g), 4e6 * (U(g) - 0.5));
      else s = readout_and_repolarize(s, p, 5e6, 1e-6, 1e-8, 1.0).state;
      ASSERT_LE(s.bloch_norm(), 1.0 + 1e-12);
      ASSERT_GE(s.shelf, 0.0);
      ASSERT_LE(s.shelf, 1.0);
    }
  }
}

TEST(Detunings, InfiniteT2StarGivesZeros) {
  const auto d = sample_detunings(ideal(), 64, 5);
  for (double x : d) EXPECT_EQ(x, 0.0);
}

TEST(Detunings, Deterministic) {
  NVEnsembleParams p;
  EXPECT_EQ(sample_detunings(p, 1000, 42), sample_detunings(p, 1000, 42));
  EXPECT_NE(sample_detunings(p, 1000, 42), sample_detunings(p, 1000, 43));
  EXPECT_THROW(sample_detunings(p, 0, 1), Error);
}

TEST(Detunings, RamseyEnvelopeIsExponential) {
  NVEnsembleParams p;
  const auto d = sample_detunings(p, 100000, 9);
  for (double t = 0.1e-6; t <= 2e-6 + 1e-12; t += 0.1e-6) {
    double acc = 0.0;
    for (double x : d) acc += std::cos(2 * kPi * x * t);
    acc /= static_cast<double>(d.size());
    EXPECT_NEAR(acc / std::exp(-t / p.t2_star), 1.0, 0.02) << "t=" << t;
  }
}

TEST(Ensemble, HahnEchoRefocusesStaticDetunings) {
  for (double t2s : {1e-6, 0.3e-6}) {
    NVEnsembleParams p;
    p.t2_star = t2s;
    const double rabi = 2 * kPi * 500e6;  // near-ideal hard pulses
    const double t_pi = kPi / rabi;
    for (double tau : {5e-6, 20e-6, 40e-6}) {
      Ensemble e(p, 1.0, sample_detunings(p, 4000, 21));
      e.set_all(ground());
      e.mw_pulse(rabi, 0.0, t_pi / 2, 0.0);
      e.free(tau / 2, 0.0);
      e.mw_pulse(rabi, 0.0, t_pi, 0.0);
      e.free(tau / 2, 0.0);
      double v = 0.0;
      for (const auto& m : e.members()) v += m.v;
      v /= static_cast<double>(e.members().size());
      EXPECT_NEAR(std::abs(v), std::exp(-tau / p.t2), 0.01) << "tau=" << tau << " t2*=" << t2s;
    }
  }
}

TEST(Readout, InitialContrastAndConvergence) {
  NVEnsembleParams p;
  const double rate = p.reference_laser_rate;
  const auto r0 = readout_and_repolarize(ground(), p, rate, 3e-6, 1e-9, 1.0);
  const auto r1 = readout_and_repolarize(SpinState{0, 0, -1, 0}, p, rate, 3e-6, 1e-9, 1.0);
  EXPECT_NEAR(r1.pl.front() / r0.pl.front(), 1.0 - p.readout_contrast, 1e-12);
  EXPECT_NEAR(r1.pl.back() / r0.pl.back(), 1.0, 1e-4);
  EXPECT_NEAR(r1.state.w, 1.0 - p.shelf_fraction, 1e-15);
  EXPECT_EQ(r1.state.shelf, p.shelf_fraction);
}

TEST(Readout, ZeroContrastIsFlat) {
  NVEnsembleParams p;
  p.readout_contrast = 0.0;
  const auto r = readout_and_repolarize(SpinState{0, 0, -1, 0}, p, 5e6, 1e-6, 1e-8, 2.0);
  for (double x : r.pl) EXPECT_EQ(x, 2.0);
}

TEST(Readout, PolarizationFasterAtHigherLaserRate) {
  NVEnsembleParams p;
  EXPECT_NEAR(p.tau_pol_at(2 * p.reference_laser_rate), p.tau_pol / 2, 1e-20);
}

TEST(Readout, EarlyWindowDifferenceDecaysWithT1) {
  // T1 experiment composed from the primitives: pi vs no pi after a dark wait.
  NVEnsembleParams p;
  p.t1 = 50e-6;
  const double rabi = 2 * kPi * 5e6;
  const double rate = p.reference_laser_rate;
  auto window = [&](bool pi, double tau) {
    SpinState s = readout_and_repolarize(ground(), p, rate, 3e-6, 1e-9, 1.0).state;
    s = propagate_free(s, p, tau, 0.0);
    if (pi) s = apply_mw_pulse(s, p, rabi, 0.0, 100e-9, 0.0);
    const auto r = readout_and_repolarize(s, p, rate, 3e-6, 1e-9, 1.0);
    double acc = 0.0;
    for (int i = 0; i < 300; ++i) acc += r.pl[static_cast<std::size_t>(i)];
    return acc;
  };
  const double d0 = window(false, 2e-6) - window(true, 2e-6);
  for (double tau : {20e-6, 50e-6, 100e-6}) {
    const double d = window(false, tau) - window(true, tau);
    EXPECT_NEAR(d / d0, std::exp(-(tau - 2e-6) / p.t1), 0.01) << tau;
  }
}
