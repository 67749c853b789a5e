#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "virtlab/instruments.hpp"

using namespace virtlab;
using namespace virtlab::instruments;

TEST(MwSource, SweepWraps) {
  MwSource mw;
  mw.set_output(true);
  mw.set_sweep(2.8e9, 2.9e9, 0.01e9);
  for (int i = 0; i < 10; ++i) mw.step(i * 1e-3);
  EXPECT_NEAR(mw.frequency(), 2.9e9, 1.0);
  mw.step(10e-3);
  EXPECT_NEAR(mw.frequency(), 2.8e9, 1.0);
}

TEST(MwSource, ElevenStepsReturnToStart) {
  MwSource mw;
  mw.set_output(true);
  mw.set_sweep(2.8e9, 2.9e9, 0.01e9);
  const double f0 = mw.frequency();
  for (int i = 0; i < 11; ++i) mw.step(i * 2e-3);
  EXPECT_EQ(mw.frequency(), f0);
  EXPECT_TRUE(mw.log().empty());
}

TEST(MwSource, ListOrder) {
  MwSource mw;
  mw.set_output(true);
  const std::vector<double> l{2.88e9, 2.86e9, 2.87e9};
  mw.set_list(l);
  std::vector<double> seen;
  for (int i = 0; i < 6; ++i) {
    seen.push_back(mw.frequency());
    mw.step(i * 1e-3);
  }
  EXPECT_EQ(seen, (std::vector<double>{l[0], l[1], l[2], l[0], l[1], l[2]}));
  EXPECT_EQ(mw.cursor(), 0u);
}

TEST(MwSource, StepErrorsAndTimingLog) {
  MwSource mw;
  mw.set_output(true);
  try {
    mw.step(0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::mode);
  }
  mw.set_list({2.87e9, 2.88e9});
  mw.step(0.0);
  mw.step(0.2e-3);
  ASSERT_EQ(mw.log().size(), 1u);
  EXPECT_NE(mw.log()[0].find("timing"), std::string::npos);
}

TEST(MwSource, RabiScalesWithAmplitude) {
  MwSource mw;
  EXPECT_EQ(mw.rabi_hz(), 0.0);
  mw.set_output(true);
  const double r0 = mw.rabi_hz();
  mw.set_power(mw.power_dbm() + 6.0206);
  EXPECT_NEAR(mw.rabi_hz() / r0, 2.0, 1e-4);
  EXPECT_FALSE(mw.dummy_info().empty());
}

TEST(Laser, IdealSquarePulses) {
  LaserModel m;
  std::vector<std::uint8_t> cmd;
  for (int r = 0; r < 3; ++r) {
    cmd.insert(cmd.end(), 50, 0);
    cmd.insert(cmd.end(), 30, 1);
  }
  const auto p = laser_emit(cmd, 1e-9, m, 1);
  for (std::size_t i = 0; i < cmd.size(); ++i) EXPECT_EQ(p.power[i], cmd[i] ? m.set_power : 0.0);
}

TEST(Laser, LongerDarkTimeLargerOvershoot) {
  LaserModel m;
  m.overshoot_amplitude = 0.1;
  m.thermal_memory = 1e-4;
  m.overshoot_decay = 50e-9;
  // brute force: build the waveform at 10 ns resolution
  auto leading = [&](double off) {
    std::vector<std::uint8_t> cmd(10, 1);
    cmd.insert(cmd.end(), static_cast<std::size_t>(off / 10e-9), 0);
    cmd.insert(cmd.end(), 10, 1);
    const auto p = laser_emit(cmd, 10e-9, m, 2, 0.0);
    return p.power[cmd.size() - 10];
  };
  EXPECT_GT(leading(1e-3), leading(1e-6));
}

TEST(Laser, ConstantGapIdenticalShapes) {
  LaserModel m;
  m.overshoot_amplitude = 0.2;
  std::vector<std::uint8_t> cmd;
  for (int r = 0; r < 5; ++r) {
    cmd.insert(cmd.end(), 100, 0);
    cmd.insert(cmd.end(), 40, 1);
  }
  const auto p = laser_emit(cmd, 1e-9, m, 3, 0.0);
  for (int r = 1; r < 5; ++r)
    for (int k = 0; k < 40; ++k) EXPECT_DOUBLE_EQ(p.power[r * 140 + 100 + k], p.power[100 + k]);
}

TEST(Laser, RejectsNonBinary) { EXPECT_THROW(laser_emit({0, 2}, 1e-9, LaserModel{}, 0), Error); }

TEST(Detector, PoissonStatistics) {
  DetectorConfig cfg;
  cfg.kind = DetectorKind::digital_pc;
  cfg.quantum_efficiency = 0.6;
  cfg.dark_rate = 0.0;
  cfg.dead_time = 0.0;
  cfg.saturation_rate = std::numeric_limits<double>::infinity();
  RateTrace tr{0.0, 1e-6, std::vector<double>(100, 1e6)};  // R*T = 100
  std::vector<double> n;
  for (int s = 0; s < 1000; ++s) n.push_back(static_cast<double>(detect_digital(tr, cfg, Rng(s)).times.size()));
  const double mean = std::accumulate(n.begin(), n.end(), 0.0) / n.size();
  double var = 0.0;
  for (double x : n) var += (x - mean) * (x - mean);
  var /= (n.size() - 1);
  EXPECT_NEAR(mean, 60.0, 4 * std::sqrt(60.0 / 1000));
  EXPECT_NEAR(var / 60.0, 1.0, 0.15);
}

TEST(Detector, DarkCountsOnly) {
  DetectorConfig cfg;
  cfg.kind = DetectorKind::digital_pc;
  cfg.dark_rate = 100.0;
  RateTrace tr{0.0, 1e-3, std::vector<double>(1000, 0.0)};
  const auto ev = detect_digital(tr, cfg, Rng(4));
  EXPECT_NEAR(static_cast<double>(ev.times.size()), 100.0, 40.0);
}

TEST(Detector, SaturationPlateau) {
  DetectorConfig cfg;
  cfg.kind = DetectorKind::digital_pc;
  cfg.quantum_efficiency = 1.0;
  RateTrace tr{0.0, 1e-8, std::vector<double>(100000, 5e9)};  // 1 ms at 5 GHz
  const auto ev = detect_digital(tr, cfg, Rng(5));
  const double measured = ev.times.size() / 1e-3;
  EXPECT_LT(measured, cfg.saturation_rate * 1.001);
  EXPECT_GT(measured, 0.95 * cfg.saturation_rate);
}

TEST(Detector, AnalogNeedsFineSampling) {
  DetectorConfig cfg;
  RateTrace tr{0.0, 1e-7, std::vector<double>(10, 1e6)};
  try {
    detect_analog(tr, cfg, Rng(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::sampling);
  }
}

TEST(Detector, AnalogLowPassStep) {
  DetectorConfig cfg;
  cfg.noise_density = 0.0;
  std::vector<double> r(2000, 0.0);
  std::fill(r.begin() + 1000, r.end(), 1e6);
  const auto a = detect_analog(RateTrace{0.0, 1e-9, r}, cfg, Rng(1));
  // one time constant 1/(2 pi B) after the step: 1 - 1/e
  // sample 1000+m has seen m+1 filter updates
  const std::size_t k = 999 + static_cast<std::size_t>(std::round(1.0 / (2 * M_PI * cfg.bandwidth) / 1e-9));
  EXPECT_NEAR(a.volts[k] / (1e6 * cfg.responsivity), 1.0 - std::exp(-1.0), 0.02);
  EXPECT_NEAR(a.volts.back(), 1e6 * cfg.responsivity, 1e-9);
}

TEST(Daq, TagQuantization) {
  DaqConfig cfg;
  cfg.counter_clock = 100e6;
  EXPECT_DOUBLE_EQ(cfg.tag_resolution(), 5e-9);
  PhotonEvents ev{0.0, 1e-6, {12.3e-9, 10e-9, 14.99e-9, 15e-9}};
  const auto raw = daq_time_tag(ev, cfg);
  EXPECT_EQ(raw.tags, (std::vector<std::int64_t>{2, 2, 2, 3}));
  EXPECT_NEAR(raw.tags[0] * raw.period, 10e-9, 1e-18);
  EXPECT_TRUE(daq_time_tag(PhotonEvents{}, cfg).tags.empty());
}

TEST(Daq, MultiChannelPeriod) {
  DaqConfig cfg;
  cfg.adc_period = 0.5e-6;
  cfg.n_analog_channels = 2;
  EXPECT_DOUBLE_EQ(cfg.analog_period(), 1.0e-6);
}

TEST(Daq, CountConservationIdealChain) {
  DetectorConfig det;
  det.kind = DetectorKind::digital_pc;
  det.quantum_efficiency = 1.0;
  det.dark_rate = 0.0;
  det.dead_time = 0.0;
  det.saturation_rate = std::numeric_limits<double>::infinity();
  RateTrace tr{0.0, 1e-8, std::vector<double>(10000, 2e7)};
  const auto ev = detect_digital(tr, det, Rng(8));
  DaqConfig cfg;
  const auto bins = daq_bin_counts(ev, cfg, 0.0, 1e-6, 100);
  EXPECT_EQ(std::accumulate(bins.values.begin(), bins.values.end(), 0.0), static_cast<double>(ev.times.size()));
  EXPECT_EQ(daq_time_tag(ev, cfg).tags.size(), ev.times.size());
}

TEST(Daq, Overrun) {
  DaqConfig cfg;
  cfg.buffer_capacity = 10;
  PhotonEvents ev{0, 1, std::vector<double>(11, 0.5)};
  try {
    daq_time_tag(ev, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::buffer_overrun);
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos);
  }
}

TEST(Daq, PairingRule) {
  EXPECT_THROW(check_pairing(DetectorKind::analog_pd, DaqMode::time_tag), Error);
  EXPECT_NO_THROW(check_pairing(DetectorKind::digital_pc, DaqMode::time_tag));
}

TEST(Determinism, DetectorsBitIdentical) {
  DetectorConfig det;
  RateTrace tr{0.0, 1e-8, std::vector<double>(5000, 3e6)};
  EXPECT_EQ(detect_analog(tr, det, Rng(9)).volts, detect_analog(tr, det, Rng(9)).volts);
  det.kind = DetectorKind::digital_pc;
  EXPECT_EQ(detect_digital(tr, det, Rng(9)).times, detect_digital(tr, det, Rng(9)).times);
}

namespace {
optics::OpticsReport test_optics() {
  optics::ObjectiveSpec o;
  optics::ConfocalGeometry g;
  return optics::report(o, g);
}
}  // namespace

TEST(Confocal, OneFwhmOffsetIsSixteenth) {
  VirtualSample s;
  s.emitters.push_back({{50, 50, 10}, 1.0});
  const auto op = test_optics();
  const double peak = confocal_rate(s, {50, 50, 10}, op, 0.0, 1.0);
  const double off = confocal_rate(s, {50 + op.r_min.in_um(), 50, 10}, op, 0.0, 1.0);
  EXPECT_NEAR(off / peak, 0.0625, 1e-3);
}

TEST(Confocal, PeakAtEmitter) {
  VirtualSample s;
  s.emitters.push_back({{20.3, 40.1, 5}, 1.0});
  const auto op = test_optics();
  const double peak = confocal_rate(s, {20.3, 40.1, 5}, op, 0.0, 1.0);
  for (double dx = -1; dx <= 1; dx += 0.1)
    for (double dz = -1; dz <= 1; dz += 0.25) EXPECT_LE(confocal_rate(s, {20.3 + dx, 40.1, 5 + dz}, op, 0.0, 1.0), peak);
}

TEST(Confocal, TwoEmittersResolved) {
  VirtualSample s;
  const auto op = test_optics();
  const double r = op.r_min.in_um();
  s.emitters.push_back({{10, 10, 5}, 1.0});
  s.emitters.push_back({{10 + 5 * r, 10, 5}, 1.0});
  std::vector<double> line;
  for (double x = 8; x < 12 + 5 * r; x += 0.01) line.push_back(confocal_rate(s, {x, 10, 5}, op, 0.0, 1.0));
  int maxima = 0;
  for (std::size_t i = 1; i + 1 < line.size(); ++i)
    if (line[i] > line[i - 1] && line[i] >= line[i + 1]) ++maxima;
  EXPECT_EQ(maxima, 2);
}

TEST(Confocal, Drift) {
  VirtualSample s;
  s.emitters.push_back({{10, 10, 5}, 1.0});
  s.drift = {0.1, 0, 0};
  const auto op = test_optics();
  EXPECT_NEAR(confocal_rate(s, {11, 10, 5}, op, 10.0, 1.0), 1.0, 1e-12);
}

TEST(Scanner, CountsAndOrder) {
  ScannerConfig sc;
  ScanPlan p;
  p.x = {0, 1, 2};
  p.y = {0, 1, 2};
  p.z = {5, 5, 1};
  const auto w = scanner_waveforms(p, sc);
  ASSERT_EQ(w.sync_edges.size(), 4u);
  EXPECT_EQ(w.positions[1], (Vec3{1, 0, 5}));
  EXPECT_EQ(w.positions[2], (Vec3{0, 1, 5}));
  p.x.n = 1;
  p.y.n = 1;
  EXPECT_EQ(scanner_waveforms(p, sc).sync_edges.size(), 1u);
  p.x = {0, 10, 7};
  p.y = {0, 10, 5};
  EXPECT_EQ(scanner_waveforms(p, sc).sync_edges.size(), 35u);
  for (double v : scanner_waveforms(p, sc).vx) {
    EXPECT_GE(v, sc.v_min);
    EXPECT_LE(v, sc.v_max);
  }
  p.x.max = 500;
  try {
    scanner_waveforms(p, sc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::range);
  }
}
