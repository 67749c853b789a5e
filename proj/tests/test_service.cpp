#include "virtlab/service.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace virtlab;
using namespace virtlab::service;
namespace fs = std::filesystem;

namespace {

Options local(std::size_t queue = 64) {
  Options o;
  o.port = 0;
  o.http_port = 0;
  o.subscriber_queue = queue;
  return o;
}

engine::Partial sample(engine::PartialKind k, std::size_t n) {
  engine::Partial p;
  p.kind = k;
  p.run_id = 3;
  p.seq = 17;
  p.index = 4;
  p.progress = 1.0 / 3.0;
  p.snr = 12.345678901234567;
  for (std::size_t i = 0; i < n; ++i) {
    p.x.push_back(2.87e9 + 0.1e6 * static_cast<double>(i) / 7.0);
    p.y.push_back(1.0 - 1e-3 * std::sin(static_cast<double>(i)));
  }
  if (k == engine::PartialKind::pulsed) p.y2 = p.y;
  if (n > 2) p.y[1] = std::numeric_limits<double>::quiet_NaN();
  return p;
}

bool same(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b));
}

json wait_for(Client& c, const std::function<bool(const json&)>& pred, double timeout = 30.0) {
  const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout);
  while (!c.events.empty()) {
    auto m = c.events.front();
    c.events.pop_front();
    if (pred(m)) return m;
  }
  while (std::chrono::steady_clock::now() < end) {
    auto m = c.read(0.5);
    if (m && pred(*m)) return *m;
  }
  return json();
}

bool is_finished_log(const json& m) { return m["kind"] == "log" && m["body"].value("event", "") == "finished"; }

}  // namespace

TEST(FrameCodec, RoundTripsEveryPartialKind) {
  for (auto k : {engine::PartialKind::spectrum, engine::PartialKind::pulsed, engine::PartialKind::scan_row})
    for (std::size_t n : {0u, 1u, 50u}) {
      const auto p = sample(k, n);
      const auto wire = json::parse(encode_frame(p).dump());
      const auto q = decode_frame(wire);
      EXPECT_EQ(q.kind, p.kind);
      EXPECT_EQ(q.run_id, p.run_id);
      EXPECT_EQ(q.seq, p.seq);
      EXPECT_EQ(q.index, p.index);
      ASSERT_EQ(q.x.size(), p.x.size());
      ASSERT_EQ(q.y.size(), p.y.size());
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_TRUE(same(q.x[i], p.x[i]));
        EXPECT_TRUE(same(q.y[i], p.y[i]));
      }
      EXPECT_EQ(q.y2.size(), p.y2.size());
      if (k == engine::PartialKind::pulsed) {
        EXPECT_TRUE(same(q.snr, p.snr));
      }
    }
}

TEST(FrameCodec, EmptyPartialIsAValidFrame) {
  const auto b = encode_frame(sample(engine::PartialKind::spectrum, 0));
  EXPECT_TRUE(b["frequency"].is_array());
  EXPECT_TRUE(b["frequency"].empty());
  EXPECT_NO_THROW(decode_frame(b));
}

TEST(FrameCodec, MalformedFramesAreDataErrors) {
  auto b = encode_frame(sample(engine::PartialKind::pulsed, 3));
  b["signal"][0] = "x";
  EXPECT_THROW(decode_frame(b), Error);
  b.erase("signal");
  EXPECT_THROW(decode_frame(b), Error);
}

TEST(Framing, DecoderReassemblesSplitStreams) {
  std::string stream;
  for (int i = 0; i < 5; ++i) stream += frame_bytes(message(static_cast<std::uint64_t>(i), "status", json::object()));
  FrameDecoder d;
  std::vector<json> out;
  for (char ch : stream) {
    d.feed(&ch, 1);
    while (auto m = d.next()) out.push_back(json::parse(*m));
  }
  ASSERT_EQ(out.size(), 5u);
  EXPECT_EQ(out[4]["id"], 4);
  FrameDecoder big;
  const char huge[4] = {'\x7f', '\x00', '\x00', '\x00'};
  big.feed(huge, 4);
  EXPECT_THROW(big.next(), Error);
}

TEST(Commands, HandledWithoutTransport) {
  Service s(config::LabConfig{}, local());
  const auto st = s.handle(message(1, "status", {}));
  EXPECT_EQ(st["id"], 1);
  EXPECT_EQ(st["body"]["state"], "idle");
  EXPECT_EQ(st["body"]["progress"], 0.0);

  const auto list = s.handle(message(2, "list_protocols", {}));
  EXPECT_EQ(list["body"]["protocols"].size(), config::protocol_kinds().size());

  const auto bad = s.handle(message(3, "xyzzy", {}));
  EXPECT_EQ(bad["kind"], "error");
  EXPECT_EQ(bad["id"], 3);
  EXPECT_EQ(s.handle(message(4, "frame", {}))["kind"], "error");
  EXPECT_EQ(s.handle(json::array())["kind"], "error");

  const auto unknown = s.handle(message(5, "set_params", {{"protocol", "rabi"}, {"params", {{"tau_stp", "1"}}}}));
  EXPECT_EQ(unknown["body"]["code"], errc::config);
  const auto ok = s.handle(message(6, "set_params", {{"protocol", "rabi"}, {"params", {{"points", 11}}}}));
  EXPECT_EQ(ok["kind"], "set_params");
  EXPECT_EQ(ok["body"]["params"]["points"], "11");
  const auto cfg = s.handle(message(7, "get_config", {}));
  EXPECT_EQ(cfg["body"]["params"]["rabi"]["points"], "11");
  EXPECT_NE(cfg["body"]["config"].get<std::string>().find("spin:"), std::string::npos);

  EXPECT_EQ(s.handle(message(8, "stop", {}))["body"]["code"], errc::stale_handle);
  EXPECT_EQ(s.handle(message(9, "subscribe", {}))["body"]["code"], errc::usage);

  // missing calibrations are refused up front, without starting a run
  const auto dep = s.handle(message(10, "start", {{"protocol", "t1"}}));
  EXPECT_EQ(dep["kind"], "error");
  EXPECT_EQ(dep["body"]["code"], errc::dependency);
  EXPECT_EQ(s.engine().status().run_id, 0u);
}

TEST(Service, StartThenStopGivesTerminalResponsesAndPartialRun) {
  Service s(config::LabConfig{}, local());
  s.start();
  Client c("127.0.0.1", s.port());
  const auto hello = c.read(5.0);
  ASSERT_TRUE(hello);
  EXPECT_EQ((*hello)["kind"], "log");
  EXPECT_EQ((*hello)["body"]["version"], kProtocolVersion);

  c.request("subscribe");
  const auto start_id = c.send("start", {{"protocol", "cw_odmr"}, {"realtime", true}});
  const auto started = wait_for(c, [&](const json& m) { return m["id"] == start_id; });
  ASSERT_EQ(started["kind"], "start") << started.dump();
  const auto run = started["body"]["run_id"].get<std::uint64_t>();
  const auto stop_id = c.send("stop");
  const auto stopped = wait_for(c, [&](const json& m) { return m["id"] == stop_id; });
  ASSERT_EQ(stopped["kind"], "stop") << stopped.dump();
  EXPECT_EQ(stopped["body"]["state"], "aborted");
  EXPECT_EQ(stopped["body"]["partial"], true);
  EXPECT_EQ(stopped["body"]["run_id"], run);
  const auto st = c.request("status");
  EXPECT_EQ(st["body"]["partial"], true);
}

TEST(Service, UnknownKindKeepsTheConnection) {
  Service s(config::LabConfig{}, local());
  s.start();
  Client c("127.0.0.1", s.port());
  const auto r = c.request("teleport");
  EXPECT_EQ(r["kind"], "error");
  EXPECT_EQ(r["body"]["code"], "message");
  c.send_raw(std::string("\0\0\0\x05hello", 9));
  const auto e = wait_for(c, [](const json& m) { return m["kind"] == "error"; }, 5.0);
  EXPECT_EQ(e["body"]["code"], errc::parse);
  EXPECT_EQ(c.request("status")["body"]["state"], "idle");
}

TEST(Service, SubscribersShareAGapFreeFrameSequence) {
  Service s(config::LabConfig{}, local(512));
  s.start();
  Client a("127.0.0.1", s.port()), b("127.0.0.1", s.port());
  a.request("subscribe");
  b.request("subscribe");
  const json params{{"sweeps", 60}, {"f_step", "1e6"}, {"dwell", "1e-3"}};
  const auto started = a.request("start", {{"protocol", "cw_odmr"}, {"params", params}});
  ASSERT_EQ(started["kind"], "start") << started.dump();
  auto collect = [](Client& c) {
    std::vector<std::uint64_t> seqs;
    wait_for(c, [&](const json& m) {
      if (m["kind"] == "frame" && m["body"]["type"] == "spectrum") seqs.push_back(m["body"]["seq"].get<std::uint64_t>());
      return is_finished_log(m);
    });
    return seqs;
  };
  const auto sa = collect(a), sb = collect(b);
  ASSERT_EQ(sa.size(), 60u);
  EXPECT_EQ(sa, sb);
  for (std::size_t i = 1; i < sa.size(); ++i) EXPECT_EQ(sa[i], sa[i - 1] + 1);
  EXPECT_EQ(s.dropped_frames(), 0u);
}

TEST(Service, StalledSubscriberNeverBlocksTheRun) {
  Service s(config::LabConfig{}, local(4));
  s.start();
  Client stalled("127.0.0.1", s.port());
  stalled.request("subscribe");  // and then never reads again
  Client ctl("127.0.0.1", s.port());
  // ~0.5 MB frames, far more than the socket buffers hold
  const json params{{"sweeps", 120}, {"f_step", "10e3"}, {"dwell", "1e-3"}, {"max_dips", 1}};
  const auto t0 = std::chrono::steady_clock::now();
  const auto started = ctl.request("start", {{"protocol", "cw_odmr"}, {"params", params}});
  ASSERT_EQ(started["kind"], "start") << started.dump();
  for (;;) {
    const auto q0 = std::chrono::steady_clock::now();
    const auto st = ctl.request("status", json::object(), 5.0);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - q0).count(), 2.0);
    const auto state = st["body"]["state"].get<std::string>();
    if (state != "running") {
      EXPECT_EQ(state, "finished") << st.dump();
      break;
    }
    ASSERT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 120.0);
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  EXPECT_GT(s.dropped_frames(), 0u);
}

TEST(Service, HeartbeatOnQuietConnections) {
  auto o = local();
  o.heartbeat = 0.2;
  Service s(config::LabConfig{}, o);
  s.start();
  Client c("127.0.0.1", s.port());
  const auto hb = wait_for(c, [](const json& m) { return m["kind"] == "frame" && m["body"]["type"] == "heartbeat"; }, 3.0);
  ASSERT_FALSE(hb.is_null());
  EXPECT_EQ(hb["body"]["state"], "idle");

  // a paused run is quiet too
  const json params{{"sweeps", 1000}, {"dwell", "1e-3"}};
  const auto run = c.request("start", {{"protocol", "cw_odmr"}, {"params", params}, {"realtime", true}})["body"]["run_id"];
  EXPECT_EQ(c.request("pause", {{"run_id", run}})["body"]["state"], "paused");
  const auto paused = wait_for(c, [](const json& m) { return m["kind"] == "frame" && m["body"]["type"] == "heartbeat" && m["body"]["state"] == "paused"; }, 3.0);
  ASSERT_FALSE(paused.is_null());
  EXPECT_EQ(paused["body"]["run_id"], run);
  c.request("stop");
}

TEST(Service, HttpCommandsFramesAndStaticAssets) {
  const auto dir = fs::temp_directory_path() / "virtlab_static";
  fs::create_directories(dir);
  std::ofstream(dir / "index.html") << "<html>virtlab</html>";
  auto o = local();
  o.static_dir = dir.string();
  Service s(config::LabConfig{}, o);
  s.start();
  httplib::Client http("127.0.0.1", s.http_port());
  auto res = http.Post("/command", message(1, "status", {}).dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(json::parse(res->body)["body"]["state"], "idle");
  res = http.Post("/command", "not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(json::parse(res->body)["kind"], "error");

  res = http.Post("/command", message(2, "start", {{"protocol", "rabi"}, {"params", {{"points", 11}}}}).dump(), "application/json");
  ASSERT_TRUE(res);
  const auto run = json::parse(res->body)["body"]["run_id"].get<std::uint64_t>();
  s.engine().wait(run);
  res = http.Get("/frames");
  ASSERT_TRUE(res);
  const auto frames = json::parse(res->body)["frames"];
  ASSERT_GE(frames.size(), 2u);
  EXPECT_EQ(frames.front()["type"], "pulsed");
  EXPECT_EQ(frames.front()["seq"], 0);
  // after names the last seq the client holds
  res = http.Get("/frames?after=0");
  ASSERT_TRUE(res);
  const auto rest = json::parse(res->body)["frames"];
  ASSERT_EQ(rest.size(), frames.size() - 1);
  EXPECT_EQ(rest.front()["seq"], 1);

  res = http.Get("/index.html");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->body, "<html>virtlab</html>");
}

TEST(Service, LateSubscriberCatchesUpFromTheBuffer) {
  Service s(config::LabConfig{}, local(512));
  s.start();
  Client c("127.0.0.1", s.port());
  const auto run = c.request("start", {{"protocol", "rabi"}, {"params", {{"points", 11}}}, {"realtime", false}})["body"]["run_id"].get<std::uint64_t>();
  s.engine().wait(run);
  const auto held = s.engine().partials().snapshot();
  ASSERT_FALSE(held.empty());

  auto collect = [&](Client& cl) {
    std::vector<std::uint64_t> seqs;
    auto take = [&](const json& m) {
      if (m["kind"] == "frame" && m["body"]["type"] != "heartbeat") seqs.push_back(m["body"]["seq"]);
    };
    for (; !cl.events.empty(); cl.events.pop_front()) take(cl.events.front());
    while (const auto m = cl.read(0.5)) take(*m);
    return seqs;
  };
  Client all("127.0.0.1", s.port());
  EXPECT_EQ(all.request("subscribe", {{"since_seq", -1}})["kind"], "subscribe");
  const auto got = collect(all);
  ASSERT_EQ(got.size(), held.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], held[i].seq);

  Client tail("127.0.0.1", s.port());
  tail.request("subscribe", {{"since_seq", 0}});
  const auto rest = collect(tail);
  ASSERT_EQ(rest.size(), held.size() - 1);
  EXPECT_EQ(rest.front(), 1u);

  Client live("127.0.0.1", s.port());
  live.request("subscribe");
  EXPECT_TRUE(collect(live).empty());
  EXPECT_EQ(live.request("subscribe", {{"since_seq", -2}})["body"]["code"], "usage");
}

TEST(Service, SavesRecordsAndBusyEndpointFails) {
  const auto out = fs::temp_directory_path() / "virtlab_service_runs";
  fs::remove_all(out);
  auto o = local();
  o.out_dir = out.string();
  Service s(config::LabConfig{}, o);
  s.start();
  Client c("127.0.0.1", s.port());
  c.request("subscribe");
  c.request("start", {{"protocol", "rabi"}, {"params", {{"points", 11}}}});
  const auto done = wait_for(c, is_finished_log);
  ASSERT_TRUE(done["body"].contains("record")) << done.dump();
  EXPECT_TRUE(fs::exists(fs::path(done["body"]["record"].get<std::string>()) / "fit.txt"));
  EXPECT_TRUE(done["body"]["derived"].contains("pi_len"));

  auto taken = o;
  taken.port = s.port();
  Service other(config::LabConfig{}, taken);
  try {
    other.start();
    FAIL() << "second bind succeeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::endpoint);
  }
}
