#pragma once

// Control plane: length-prefixed JSON messages over TCP for live sessions,
// one-shot POST /command plus static assets over HTTP.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <limits>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "virtlab/config.hpp"
#include "virtlab/engine.hpp"
#include "virtlab/error.hpp"
#include "virtlab/protocols.hpp"
#include "virtlab/record.hpp"
// after Eigen: <resolv.h> defines a `_res` macro that collides with Eigen parameter names
#include "httplib.h"

namespace virtlab::service {

using json = nlohmann::json;

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxMessage = 64u << 20;

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> k{"list_protocols", "get_config", "set_params", "start", "stop",
                                          "pause",          "resume",     "status",     "subscribe"};
  return k;
}

/// Kinds only the service emits.
inline const std::vector<std::string>& events() {
  static const std::vector<std::string> k{"frame", "log", "error"};
  return k;
}

inline json message(std::uint64_t id, const std::string& kind, json body) {
  return json{{"id", id}, {"kind", kind}, {"body", std::move(body)}};
}

inline json error_message(std::uint64_t id, const std::string& code, const std::string& text) {
  return message(id, "error", json{{"code", code}, {"message", text}});
}

// ---------------------------------------------------------------------------
// Framing: 4-byte big-endian payload length, then UTF-8 JSON.

inline std::string frame_bytes(const json& m) {
  const std::string payload = m.dump();
  if (payload.size() > kMaxMessage) fail(errc::data, "message exceeds " + std::to_string(kMaxMessage) + " bytes");
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out(4, '\0');
  out[0] = static_cast<char>((n >> 24) & 0xff);
  out[1] = static_cast<char>((n >> 16) & 0xff);
  out[2] = static_cast<char>((n >> 8) & 0xff);
  out[3] = static_cast<char>(n & 0xff);
  return out + payload;
}

/// Incremental decoder for a byte stream of frames.
class FrameDecoder {
public:
  void feed(const char* data, std::size_t n) { buf_.append(data, n); }

  /// Next complete payload, if any.
  std::optional<std::string> next() {
    if (buf_.size() < 4) return std::nullopt;
    const auto b = [&](int i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[static_cast<std::size_t>(i)])); };
    const std::uint32_t n = b(0) << 24 | b(1) << 16 | b(2) << 8 | b(3);
    if (n > kMaxMessage) fail(errc::data, "incoming message of " + std::to_string(n) + " bytes exceeds the limit");
    if (buf_.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
    std::string out = buf_.substr(4, n);
    buf_.erase(0, 4 + static_cast<std::size_t>(n));
    return out;
  }

private:
  std::string buf_;
};

// ---------------------------------------------------------------------------
// Frame codec. Arrays are plain decimal lists; NaN travels as null.

namespace detail {

inline json numbers(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) {
    if (std::isfinite(x)) a.push_back(x);
    else a.push_back(nullptr);
  }
  return a;
}

inline std::vector<double> numbers(const json& a) {
  std::vector<double> v;
  if (!a.is_array()) fail(errc::data, "frame field is not an array");
  v.reserve(a.size());
  for (const auto& x : a) {
    if (x.is_null()) v.push_back(std::numeric_limits<double>::quiet_NaN());
    else if (x.is_number()) v.push_back(x.get<double>());
    else fail(errc::data, "frame array holds a non-number");
  }
  return v;
}

}  // namespace detail

/// spectrum -> (frequency, contrast); pulsed -> (param, signal[, signal2], snr);
/// scan_row -> (row, positions, values).
inline json encode_frame(const engine::Partial& p) {
  json b{{"run_id", p.run_id}, {"seq", p.seq}, {"type", engine::to_string(p.kind)}, {"progress", p.progress}};
  switch (p.kind) {
    case engine::PartialKind::spectrum:
      b["sweeps"] = p.index;
      b["frequency"] = detail::numbers(p.x);
      b["contrast"] = detail::numbers(p.y);
      break;
    case engine::PartialKind::pulsed:
      b["groups"] = p.index;
      b["param"] = detail::numbers(p.x);
      b["signal"] = detail::numbers(p.y);
      if (!p.y2.empty()) b["signal2"] = detail::numbers(p.y2);
      b["snr"] = p.snr;
      break;
    case engine::PartialKind::scan_row:
      b["row"] = p.index;
      b["positions"] = detail::numbers(p.x);
      b["values"] = detail::numbers(p.y);
      break;
  }
  return b;
}

inline engine::Partial decode_frame(const json& b) {
  engine::Partial p;
  try {
    p.kind = engine::partial_kind_from_string(b.at("type").get<std::string>());
    p.run_id = b.at("run_id").get<std::uint64_t>();
    p.seq = b.at("seq").get<std::uint64_t>();
    p.progress = b.at("progress").get<double>();
    switch (p.kind) {
      case engine::PartialKind::spectrum:
        p.index = b.at("sweeps").get<int>();
        p.x = detail::numbers(b.at("frequency"));
        p.y = detail::numbers(b.at("contrast"));
        break;
      case engine::PartialKind::pulsed:
        p.index = b.at("groups").get<int>();
        p.x = detail::numbers(b.at("param"));
        p.y = detail::numbers(b.at("signal"));
        if (b.contains("signal2")) p.y2 = detail::numbers(b.at("signal2"));
        p.snr = b.at("snr").get<double>();
        break;
      case engine::PartialKind::scan_row:
        p.index = b.at("row").get<int>();
        p.x = detail::numbers(b.at("positions"));
        p.y = detail::numbers(b.at("values"));
        break;
    }
  } catch (const json::exception& e) {
    fail(errc::data, std::string("malformed frame: ") + e.what());
  }
  return p;
}

inline json status_body(const engine::Status& s) {
  json b{{"run_id", s.run_id}, {"state", engine::to_string(s.state)}, {"progress", s.progress}, {"label", s.label}};
  if (s.state != engine::State::idle) {
    b["current"] = s.current;
    b["snr"] = s.snr;
  }
  if (!s.error_code.empty()) b["error"] = json{{"code", s.error_code}, {"message", s.error}};
  return b;
}

// ---------------------------------------------------------------------------
// Sockets

namespace detail {

inline bool send_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const auto n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    off += static_cast<std::size_t>(n);
  }
  return true;
}

inline sockaddr_in address(const std::string& host, int port) {
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &a.sin_addr) != 1) fail(errc::endpoint, "bad IPv4 address '" + host + "'");
  return a;
}

}  // namespace detail

/// Blocking client for scripts and tests.
class Client {
public:
  Client(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(errc::endpoint, "socket: " + std::string(std::strerror(errno)));
    const auto a = detail::address(host, port);
    if (::connect(fd_, reinterpret_cast<const sockaddr*>(&a), sizeof a) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      fail(errc::endpoint, "cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
    }
  }
  ~Client() {
    if (fd_ >= 0) ::close(fd_);
  }
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  std::uint64_t send(const std::string& kind, json body = json::object()) {
    const auto id = ++next_id_;
    send_raw(frame_bytes(message(id, kind, std::move(body))));
    return id;
  }
  void send_raw(const std::string& bytes) {
    if (!detail::send_all(fd_, bytes)) fail(errc::endpoint, "connection closed while sending");
  }

  /// Next message from the server; nullopt on timeout.
  std::optional<json> read(double timeout_s = 5.0) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
    for (;;) {
      if (auto m = dec_.next()) return json::parse(*m);
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()).count();
      if (left <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(left));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) return std::nullopt;
      char buf[65536];
      const auto n = ::recv(fd_, buf, sizeof buf, 0);
      if (n <= 0) fail(errc::endpoint, "connection closed by server");
      dec_.feed(buf, static_cast<std::size_t>(n));
    }
  }

  /// Send a command and wait for its terminal response; other messages are
  /// queued in `events`.
  json request(const std::string& kind, json body = json::object(), double timeout_s = 30.0) {
    const auto id = send(kind, std::move(body));
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
    for (;;) {
      const double left = std::chrono::duration<double>(deadline - std::chrono::steady_clock::now()).count();
      auto m = left > 0 ? read(left) : std::nullopt;
      if (!m) fail(errc::endpoint, "no response to '" + kind + "' within " + std::to_string(timeout_s) + " s");
      if (m->value("id", std::uint64_t{0}) == id) return *m;
      events.push_back(std::move(*m));
    }
  }

  std::deque<json> events;

private:
  int fd_ = -1;
  std::uint64_t next_id_ = 0;
  FrameDecoder dec_;
};

// ---------------------------------------------------------------------------
// Service

struct Options {
  std::string host = "127.0.0.1";
  int port = 8765;       // 0: ephemeral
  int http_port = 8766;  // 0: ephemeral, -1: disabled
  std::string static_dir;
  double heartbeat = 2.0;
  std::size_t subscriber_queue = 64;
  std::string out_dir;  // records are saved here when non-empty
  bool realtime = false;

  static Options from(const config::ServiceConfig& s) {
    Options o;
    o.host = s.host;
    o.port = s.port;
    o.http_port = s.http_port;
    o.static_dir = s.static_dir;
    o.heartbeat = s.heartbeat;
    o.subscriber_queue = s.subscriber_queue;
    return o;
  }
};

class Service {
public:
  Service(config::LabConfig cfg, Options opt)
      : cfg_(std::move(cfg)), opt_(std::move(opt)), engine_(cfg_.engine.partial_buffer), lab_(cfg_) {
    if (opt_.subscriber_queue < 1) fail(errc::config, "subscriber queue must hold at least one frame");
    if (!(opt_.heartbeat > 0.0)) fail(errc::config, "heartbeat period must be > 0");
  }
  ~Service() {
    stop();
    halt_engine();  // the job refers to members destroyed before the engine
  }
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Bind both endpoints; a taken address is an endpoint error.
  void start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) fail(errc::endpoint, "socket: " + std::string(std::strerror(errno)));
    auto a = detail::address(opt_.host, opt_.port);
    if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&a), sizeof a) != 0 || ::listen(listen_fd_, 16) != 0) {
      const std::string why = std::strerror(errno);
      ::close(listen_fd_);
      listen_fd_ = -1;
      fail(errc::endpoint, "cannot listen on " + opt_.host + ":" + std::to_string(opt_.port) + ": " + why);
    }
    socklen_t len = sizeof a;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&a), &len);
    port_ = ntohs(a.sin_port);

    if (opt_.http_port >= 0) {
      http_ = std::make_unique<httplib::Server>();
      setup_http();
      if (opt_.http_port == 0) {
        http_port_ = http_->bind_to_any_port(opt_.host);
      } else if (http_->bind_to_port(opt_.host, opt_.http_port)) {
        http_port_ = opt_.http_port;
      }
      if (http_port_ <= 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        http_.reset();
        fail(errc::endpoint, "cannot listen on " + opt_.host + ":" + std::to_string(opt_.http_port) + " (HTTP)");
      }
      http_thread_ = std::thread([this] { http_->listen_after_bind(); });
    }
    sub_id_ = engine_.subscribe([this](const engine::Partial& p) { fan_out(p); });
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    engine_.unsubscribe(sub_id_);
    if (http_) http_->stop();
    if (http_thread_.joinable()) http_thread_.join();
    if (acceptor_.joinable()) acceptor_.join();
    ::close(listen_fd_);
    listen_fd_ = -1;
    std::list<std::shared_ptr<Connection>> conns;
    {
      std::lock_guard lock(conn_m_);
      conns.swap(conns_);
    }
    for (auto& c : conns) c->close();
    for (auto& c : conns) c->join();
    halt_engine();
  }

  int port() const { return port_; }
  int http_port() const { return http_port_; }
  engine::Engine& engine() { return engine_; }
  std::size_t dropped_frames() const { return dropped_.load(); }

  /// Block until a signal-like stop request (used by the CLI).
  void run_forever(const std::atomic<bool>& quit) {
    while (!quit.load() && running_.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }

  /// Execute one command; always returns exactly one terminal response.
  json handle(const json& msg, std::function<void(std::optional<std::int64_t> since)> subscribe = {}) {
    std::uint64_t id = 0;
    if (!msg.is_object()) return error_message(0, "message", "message must be an object");
    if (msg.contains("id")) {
      if (!msg["id"].is_number_unsigned()) return error_message(0, "message", "id must be a non-negative integer");
      id = msg["id"].get<std::uint64_t>();
    }
    if (!msg.contains("kind") || !msg["kind"].is_string()) return error_message(id, "message", "message needs a string 'kind'");
    const auto kind = msg["kind"].get<std::string>();
    const json body = msg.contains("body") && !msg["body"].is_null() ? msg["body"] : json::object();
    if (!body.is_object()) return error_message(id, "message", "body must be an object");
    if (std::find(commands().begin(), commands().end(), kind) == commands().end()) {
      const bool event = std::find(events().begin(), events().end(), kind) != events().end();
      return error_message(id, "message",
                           event ? "'" + kind + "' is emitted by the service, not a command" : "unknown message kind '" + kind + "'");
    }
    std::lock_guard lock(cmd_m_);  // commands are serialized
    try {
      return message(id, kind, execute(kind, body, subscribe));
    } catch (const Error& e) {
      return error_message(id, e.code(), e.what());
    } catch (const json::exception& e) {
      return error_message(id, "message", std::string("malformed body: ") + e.what());
    }
  }

private:
  void halt_engine() {
    if (!engine_.busy()) return;
    const auto id = engine_.status().run_id;
    try {
      engine_.control(id, engine::Command::abort);
    } catch (const Error&) {
    }
    engine_.wait(id);
  }

  struct Connection {
    int fd = -1;
    std::mutex m;
    std::condition_variable cv;
    // one ordered queue; only frames may be dropped (oldest first)
    struct Out {
      std::string bytes;
      bool frame;
    };
    std::deque<Out> queue;
    std::size_t frames = 0;
    bool subscribed = false;
    bool closed = false;
    std::thread reader, writer;

    void push(std::string bytes) { queue.push_back({std::move(bytes), false}); }
    bool push_frame(std::string bytes, std::size_t cap) {
      bool dropped = false;
      if (frames >= cap) {
        const auto it = std::find_if(queue.begin(), queue.end(), [](const Out& o) { return o.frame; });
        queue.erase(it);
        --frames;
        dropped = true;
      }
      queue.push_back({std::move(bytes), true});
      ++frames;
      return dropped;
    }

    void close() {
      {
        std::lock_guard lock(m);
        closed = true;
      }
      cv.notify_all();
      ::shutdown(fd, SHUT_RDWR);
    }
    void join() {
      if (reader.joinable()) reader.join();
      if (writer.joinable()) writer.join();
      ::close(fd);
    }
  };

  json execute(const std::string& kind, const json& body, const std::function<void(std::optional<std::int64_t>)>& subscribe) {
    if (kind == "list_protocols") {
      json list = json::array();
      for (const auto& k : config::protocol_kinds()) {
        json params = json::array();
        for (const auto& s : config::protocol_params().at(k)) params.push_back({{"name", s.name}, {"default", cfg_.param(k, s.name)}, {"doc", s.doc}});
        list.push_back({{"name", k}, {"params", params}});
      }
      return json{{"protocols", list}};
    }
    if (kind == "get_config") {
      json session = json::object();
      for (const auto& [k, o] : session_) session[k] = o;
      json cal = json::object();
      // the running job owns the calibrations
      if (!engine_.busy() && cal_.pi_len) cal = {{"pi_len", *cal_.pi_len}, {"source", cal_.pi_source}};
      return json{{"config", config::to_yaml(cfg_)}, {"seed", cfg_.seed}, {"params", session}, {"calibration", cal}};
    }
    if (kind == "set_params") {
      const auto proto = body.at("protocol").get<std::string>();
      auto merged = session_[proto];
      const auto given = body.value("params", json::object());
      for (const auto& [k, v] : given.items()) merged[k] = v.is_string() ? v.get<std::string>() : v.dump();
      protocols::Params check(cfg_, proto, merged);  // validates names and the protocol
      session_[proto] = merged;
      return json{{"protocol", proto}, {"params", check.values()}};
    }
    if (kind == "start") return start_run(body);
    if (kind == "status") {
      auto b = status_body(engine_.status());
      std::lock_guard lock(last_m_);
      if (last_.run_id == engine_.status().run_id && last_.run_id != 0) {
        b["partial"] = last_.partial;
        if (!last_.record.empty()) b["record"] = last_.record;
      }
      return b;
    }
    if (kind == "subscribe") {
      if (!subscribe) fail(errc::usage, "subscribe needs a streaming connection");
      // since_seq: last seq the client holds (-1: everything buffered); absent: live only
      std::optional<std::int64_t> since;
      if (body.contains("since_seq")) {
        since = body.at("since_seq").get<std::int64_t>();
        if (*since < -1) fail(errc::usage, "since_seq must be >= -1");
      }
      subscribe(since);
      return json{{"subscribed", true}, {"run_id", engine_.status().run_id}};
    }
    // pause, resume, stop act on the active run
    const auto current = engine_.status().run_id;
    const auto handle = body.value("run_id", current);
    if (kind == "pause") return status_body(engine_.control(handle, engine::Command::pause));
    if (kind == "resume") return status_body(engine_.control(handle, engine::Command::resume));
    engine_.control(handle, engine::Command::abort);  // kind == "stop"
    auto b = status_body(engine_.wait(handle));
    std::lock_guard lock(last_m_);
    b["partial"] = last_.run_id == handle ? last_.partial : true;
    if (last_.run_id == handle && !last_.record.empty()) b["record"] = last_.record;
    return b;
  }

  json start_run(const json& body) {
    const auto proto = body.at("protocol").get<std::string>();
    auto ov = session_[proto];
    const auto given = body.value("params", json::object());
    for (const auto& [k, v] : given.items()) ov[k] = v.is_string() ? v.get<std::string>() : v.dump();
    protocols::Params check(cfg_, proto, ov);  // reject before the engine starts
    if (!engine_.busy()) protocols::check_prerequisites(cfg_, proto, ov, cal_);  // a busy engine fails below
    const bool realtime = body.value("realtime", opt_.realtime);
    const auto id = engine_.start(
        proto,
        [this, proto, ov](engine::RunContext& ctx) {
          Finished f;
          f.run_id = ctx.run_id();
          try {
            const auto r = protocols::run_protocol(lab_, proto, ov, cal_, ctx);
            f.partial = r.partial;
            if (!opt_.out_dir.empty()) f.record = record::save_record(r, opt_.out_dir).string();
            for (const auto& [k, v] : r.derived) f.derived[k] = std::isfinite(v) ? json(v) : json(nullptr);
            for (const auto& w : r.warnings) f.warnings.push_back(w);
          } catch (const Error& e) {
            f.partial = true;
            f.error = json{{"code", e.code()}, {"message", e.what()}};
            finish(f);
            throw;
          }
          finish(f);
        },
        realtime);
    return json{{"run_id", id}, {"protocol", proto}, {"params", check.values()}};
  }

  struct Finished {
    std::uint64_t run_id = 0;
    bool partial = false;
    std::string record;
    json derived = json::object();
    json warnings = json::array();
    json error;
  };

  void finish(const Finished& f) {
    {
      std::lock_guard lock(last_m_);
      last_ = f;
    }
    json b{{"run_id", f.run_id}, {"event", "finished"}, {"partial", f.partial}, {"derived", f.derived}, {"warnings", f.warnings}};
    if (!f.record.empty()) b["record"] = f.record;
    if (!f.error.is_null()) b["error"] = f.error;
    broadcast_log(b);
  }

  void broadcast_log(const json& body) {
    const auto bytes = frame_bytes(message(0, "log", body));
    std::lock_guard lock(conn_m_);
    for (auto& c : conns_) {
      {
        std::lock_guard lk(c->m);
        if (!c->subscribed) continue;
        c->push(bytes);
      }
      c->cv.notify_one();
    }
  }

  /// Runs on the engine worker: enqueue only, never wait on a socket.
  void fan_out(const engine::Partial& p) {
    const auto bytes = frame_bytes(message(0, "frame", encode_frame(p)));
    std::lock_guard lock(conn_m_);
    for (auto& c : conns_) push_frame(*c, bytes);
  }

  void push_frame(Connection& c, const std::string& bytes) {
    {
      std::lock_guard lk(c.m);
      if (!c.subscribed || c.closed) return;
      if (c.push_frame(bytes, opt_.subscriber_queue)) ++dropped_;
    }
    c.cv.notify_one();
  }

  void accept_loop() {
    while (running_.load()) {
      pollfd p{listen_fd_, POLLIN, 0};
      if (::poll(&p, 1, 100) <= 0) continue;
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto c = std::make_shared<Connection>();
      c->fd = fd;
      std::list<std::shared_ptr<Connection>> dead;
      {
        std::lock_guard lock(conn_m_);
        for (auto it = conns_.begin(); it != conns_.end();) {
          bool closed;
          {
            std::lock_guard lk((*it)->m);
            closed = (*it)->closed;
          }
          if (closed) dead.splice(dead.end(), conns_, it++);
          else ++it;
        }
        conns_.push_back(c);
      }
      for (auto& d : dead) {  // joined outside the lock: a reader may still be finishing a command
        d->close();
        d->join();
      }
      c->push(frame_bytes(message(0, "log", hello())));
      c->writer = std::thread([this, c] { write_loop(*c); });
      c->reader = std::thread([this, c] { read_loop(*c); });
    }
  }

  json hello() const {
    return json{{"event", "hello"}, {"service", "virtlab"}, {"version", kProtocolVersion}, {"commands", commands()}, {"events", events()},
                {"framing", "u32 big-endian length + UTF-8 JSON"}};
  }

  void read_loop(Connection& c) {
    FrameDecoder dec;
    char buf[65536];
    for (;;) {
      const auto n = ::recv(c.fd, buf, sizeof buf, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      dec.feed(buf, static_cast<std::size_t>(n));
      try {
        while (auto payload = dec.next()) {
          json reply;
          try {
            reply = handle(json::parse(*payload), [&](std::optional<std::int64_t> since) { subscribe(c, since); });
          } catch (const json::parse_error& e) {
            reply = error_message(0, errc::parse, std::string("message is not JSON: ") + e.what());
          }
          {
            std::lock_guard lk(c.m);
            c.push(frame_bytes(reply));
          }
          c.cv.notify_one();
        }
      } catch (const Error& e) {  // oversized frame: the stream cannot be resynchronized
        {
          std::lock_guard lk(c.m);
          c.push(frame_bytes(error_message(0, e.code(), e.what())));
        }
        c.cv.notify_one();
        break;
      }
    }
    {
      std::lock_guard lk(c.m);
      c.closed = true;
    }
    c.cv.notify_all();
  }

  void subscribe(Connection& c, std::optional<std::int64_t> since) {
    const auto run = engine_.status().run_id;
    std::lock_guard lk(c.m);
    c.subscribed = true;
    if (!since) return;
    // catch-up from the engine's buffer for reconnecting clients
    for (const auto& p : engine_.partials().snapshot())
      if (p.run_id == run && static_cast<std::int64_t>(p.seq) > *since) {
        if (c.push_frame(frame_bytes(message(0, "frame", encode_frame(p))), opt_.subscriber_queue)) ++dropped_;
      }
  }

  void write_loop(Connection& c) {
    const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(opt_.heartbeat));
    auto last = std::chrono::steady_clock::now();
    for (;;) {
      std::string out;
      {
        std::unique_lock lk(c.m);
        c.cv.wait_until(lk, last + period, [&] { return c.closed || !c.queue.empty(); });
        if (c.closed && c.queue.empty()) break;
        if (!c.queue.empty()) {
          if (c.queue.front().frame) --c.frames;
          out = std::move(c.queue.front().bytes);
          c.queue.pop_front();
        }
      }
      if (out.empty()) {
        if (std::chrono::steady_clock::now() < last + period) continue;
        // any quiet stretch gets one, so paused or slow runs still look alive
        const auto s = engine_.status();
        out = frame_bytes(message(0, "frame", json{{"type", "heartbeat"}, {"run_id", s.run_id}, {"state", engine::to_string(s.state)}}));
      }
      if (!detail::send_all(c.fd, out)) break;
      last = std::chrono::steady_clock::now();
    }
    {
      std::lock_guard lk(c.m);
      c.closed = true;
    }
    ::shutdown(c.fd, SHUT_RDWR);
  }

  void setup_http() {
    http_->Post("/command", [this](const httplib::Request& req, httplib::Response& res) {
      json reply;
      try {
        reply = handle(json::parse(req.body));
      } catch (const json::parse_error& e) {
        reply = error_message(0, errc::parse, std::string("request body is not JSON: ") + e.what());
      }
      res.set_content(reply.dump(), "application/json");
    });
    // frames still held by the engine's bounded buffer, for polling clients
    http_->Get("/frames", [this](const httplib::Request& req, httplib::Response& res) {
      // after: last seq the client holds; absent means everything buffered
      std::int64_t after = -1;
      if (req.has_param("after")) after = std::strtoll(req.get_param_value("after").c_str(), nullptr, 10);
      const auto run = engine_.status().run_id;
      json frames = json::array();
      for (const auto& p : engine_.partials().snapshot())
        if (p.run_id == run && static_cast<std::int64_t>(p.seq) > after) frames.push_back(encode_frame(p));
      res.set_content(json{{"run_id", run}, {"frames", frames}}.dump(), "application/json");
    });
    if (!opt_.static_dir.empty() && std::filesystem::is_directory(opt_.static_dir)) http_->set_mount_point("/", opt_.static_dir);
  }

  config::LabConfig cfg_;
  Options opt_;
  engine::Engine engine_;
  engine::Lab lab_;
  protocols::Calibrations cal_;
  std::map<std::string, protocols::Overrides> session_;
  std::mutex cmd_m_;

  std::mutex last_m_;
  Finished last_;

  int listen_fd_ = -1;
  int port_ = 0;
  int http_port_ = 0;
  std::unique_ptr<httplib::Server> http_;
  std::thread http_thread_, acceptor_;
  std::atomic<bool> running_{false};
  std::uint64_t sub_id_ = 0;

  std::mutex conn_m_;
  std::list<std::shared_ptr<Connection>> conns_;
  std::atomic<std::size_t> dropped_{0};
};

}  // namespace virtlab::service
