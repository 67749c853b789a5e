// virtlab: command-line front end for the virtual ODMR lab.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "virtlab/virtlab.hpp"
#include "virtlab/service.hpp"

using namespace virtlab;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
};

config::LabConfig load(const Globals& g) {
  std::string path = g.config;
  if (path.empty())
    if (const char* env = std::getenv("VIRTLAB_CONFIG")) path = env;
  auto cfg = path.empty() ? config::LabConfig{} : config::load_config(path);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

protocols::Overrides parse_params(const std::vector<std::string>& kv) {
  protocols::Overrides o;
  for (const auto& s : kv) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) fail(errc::usage, "--param expects key=value, got '" + s + "'");
    o[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return o;
}

void print_derived(const record::Record& r) {
  for (const auto& [k, v] : r.derived) std::cout << k << '=' << record::fmt(v) << '\n';
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    char* end = nullptr;
    const double x = std::strtod(tok.c_str(), &end);
    if (tok.empty() || end != tok.c_str() + tok.size()) fail(errc::usage, "bad number '" + tok + "' in list");
    v.push_back(x);
  }
  return v;
}

/// "start:stop:count" (inclusive) or "a,b,c".
std::vector<double> parse_sweep(const std::string& s) {
  if (s.find(':') == std::string::npos) return parse_list(s);
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ':')) parts.push_back(tok);
  if (parts.size() != 3) fail(errc::usage, "sweep range must be start:stop:count");
  const auto a = parse_list(parts[0]), b = parse_list(parts[1]);
  const long n = std::strtol(parts[2].c_str(), nullptr, 10);
  if (a.size() != 1 || b.size() != 1 || n < 1) fail(errc::usage, "sweep range must be start:stop:count");
  auto v = protocols::linspace(a[0], b[0], n);
  for (auto& x : v) x = protocols::snap_ns(x);
  return v;
}

struct SeqArgs {
  std::string kind;
  std::string sweep;
  double pi_len = 0.0;
  std::string sync = "method2";
  std::string averaging = "np";
  std::int64_t repeats = 1;
  bool constant_period = false;
  int xy8_order = 1;
  double laser_pulse_len = 3e-6, readout_len = 3e-6, init_wait = 1e-6, mw_readout_wait = 100e-9, series_idle = 10e-6;
  std::string output;
};

void add_seq_options(CLI::App* c, SeqArgs& a) {
  c->add_option("kind", a.kind, "t1|t1_alternating|rabi|ramsey|hahn_echo|pi_calibration|xy8")->required();
  c->add_option("--sweep", a.sweep, "sweep values in s: start:stop:count or a,b,c")->required();
  c->add_option("--pi-len", a.pi_len, "pi pulse length in s (ramsey, hahn_echo, t1_alternating, xy8)");
  c->add_option("--sync", a.sync, "method1|method2");
  c->add_option("--averaging", a.averaging, "np|pn");
  c->add_option("--repeats", a.repeats, "repetitions N");
  c->add_flag("--constant-period", a.constant_period, "keep the laser-to-laser gap constant");
  c->add_option("--xy8-order", a.xy8_order, "XY8 blocks");
  c->add_option("--laser-pulse-len", a.laser_pulse_len, "polarization pulse, s");
  c->add_option("--readout-len", a.readout_len, "readout pulse, s");
  c->add_option("--init-wait", a.init_wait, "wait after each laser pulse, s");
  c->add_option("--mw-readout-wait", a.mw_readout_wait, "last MW pulse to readout, s");
  c->add_option("--series-idle", a.series_idle, "idle between series, s");
  c->add_option("-o,--output", a.output, "write the textual timing format here");
}

sequence::CompiledSequence compile_seq(const config::LabConfig& cfg, const SeqArgs& a) {
  sequence::Fixed f;
  f.pi_len = a.pi_len;
  f.laser_pulse_len = a.laser_pulse_len;
  f.readout_len = a.readout_len;
  f.init_wait = a.init_wait;
  f.mw_readout_wait = a.mw_readout_wait;
  f.series_idle = a.series_idle;
  sequence::Options o;
  o.constant_period = a.constant_period;
  o.xy8_order = a.xy8_order;
  const auto spec = sequence::build(sequence::kind_from_string(a.kind), parse_sweep(a.sweep), f, o);
  return sequence::compile(spec, cfg.pulse_gen, sequence::sync_from_string(a.sync), sequence::averaging_from_string(a.averaging),
                           a.repeats);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(errc::io, "cannot write '" + path + "'");
  os << text;
  if (!os) fail(errc::io, "write to '" + path + "' failed");
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(errc::io, "cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(is), {}};
}

void print_findings(const sequence::ValidationReport& rep) {
  for (const auto& f : rep.findings) std::cout << "finding " << f.code << ": " << f.message << '\n';
  std::cout << "valid=" << (rep.ok() ? "true" : "false") << '\n';
}

void print_summary(const sequence::CompiledSequence& c, const sequence::ValidationReport& rep) {
  std::cout << "kind=" << sequence::to_string(c.kind) << '\n'
            << "params=" << c.n_params() << '\n'
            << "repeats=" << c.n_repeats << '\n'
            << "variants=" << c.variants << '\n'
            << "averaging=" << sequence::to_string(c.averaging) << '\n'
            << "sync=" << sequence::to_string(c.sync_method) << '\n'
            << "readout_windows=" << c.readout_windows.size() << '\n'
            << "sync_edges=" << c.sync_edges.size() << '\n'
            << "instructions=" << c.program.instruction_count() << '\n'
            << "total_duration_ns=" << c.total_duration << '\n';
  print_findings(rep);
}

std::atomic<bool> g_quit{false};

/// Top-level help followed by the help of every (nested) subcommand.
std::string full_help(const CLI::App& app) {
  std::string out = app.help();
  std::function<void(const CLI::App&)> walk = [&](const CLI::App& a) {
    for (const auto* sub : a.get_subcommands([](const CLI::App*) { return true; })) {
      out += "\n" + sub->help();
      walk(*sub);
    }
  };
  walk(app);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"virtlab: deterministic virtual ODMR lab", "virtlab"};
  app.set_help_flag();  // handled below so that --help covers every subcommand
  auto* help = app.add_flag("-h,--help", "print help for every subcommand and flag");
  app.require_subcommand(0, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "lab configuration file (default: $VIRTLAB_CONFIG, else built-in defaults)");
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "override the configuration seed");
  app.add_option("--out", g.out, "record output directory")->capture_default_str();

  // optics report
  auto* optics = app.add_subcommand("optics", "optical design calculations");
  auto* optics_report = optics->add_subcommand("report", "collection bound, resolution and confocal matching");
  optics->require_subcommand(1);

  // seq compile|render|validate
  auto* seq = app.add_subcommand("seq", "pulse sequences");
  seq->require_subcommand(1);
  SeqArgs compile_args, render_args;
  auto* seq_compile = seq->add_subcommand("compile", "compile a sequence and print its summary");
  add_seq_options(seq_compile, compile_args);
  auto* seq_render = seq->add_subcommand("render", "compile a sequence and print the textual timing format");
  add_seq_options(seq_render, render_args);
  std::string validate_path;
  auto* seq_validate = seq->add_subcommand("validate", "parse a textual timing file and re-check it against the hardware");
  seq_validate->add_option("file", validate_path, "timing file")->required();

  // run
  auto* run = app.add_subcommand("run", "run a measurement protocol and save its record");
  std::string run_kind, calibration;
  std::vector<std::string> run_params;
  run->add_option("protocol", run_kind, "confocal_map|cw_odmr|rabi|pi_calibration|t1|ramsey|hahn_echo")->required();
  run->add_option("-p,--param", run_params, "protocol parameter key=value (repeatable)");
  run->add_option("--calibration", calibration, "record directory of a rabi or pi_calibration run supplying pi_len");

  // replay
  auto* replay = app.add_subcommand("replay", "re-run a record from its stored seed and compare");
  std::string replay_path;
  replay->add_option("record", replay_path, "record directory")->required();

  // serve
  auto* serve = app.add_subcommand("serve", "start the control service");
  std::string endpoint, static_dir;
  int http_port = -2;
  bool no_realtime = false;
  serve->add_option("--endpoint", endpoint, "host:port of the framed stream (default from config)");
  serve->add_option("--http-port", http_port, "port for POST /command and static assets (default from config)");
  serve->add_option("--static", static_dir, "directory of UI assets (default from config)");
  serve->add_flag("--no-realtime", no_realtime, "do not pace runs to simulated time");

  // fit
  auto* fit = app.add_subcommand("fit", "fit a model to two columns of a trace file");
  std::string fit_path, model, xcol, ycol;
  int max_dips = 8;
  bool stretched = false;
  fit->add_option("trace", fit_path, "trace.csv or record directory")->required();
  fit->add_option("--model", model, "lorentzian_multi|exp_decay|damped_cosine")->required();
  fit->add_option("--x", xcol, "x column (default: first)");
  fit->add_option("--y", ycol, "y column (default: second)");
  fit->add_option("--max-dips", max_dips, "lorentzian_multi: most dips to try");
  fit->add_flag("--stretched", stretched, "exp_decay: free stretch exponent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (help->count() > 0) {
      std::cout << full_help(app);
      return 0;
    }
    std::cerr << "error: " << errc::usage << ": " << e.what() << '\n';
    return 2;
  }
  if (help->count() > 0 || app.get_subcommands().empty()) {
    std::cout << full_help(app);
    return help->count() > 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (optics_report->parsed()) {
      const auto cfg = load(g);
      optics::print_report(std::cout, optics::report(cfg.objective, cfg.geometry));
      return 0;
    }
    if (seq_compile->parsed() || seq_render->parsed()) {
      const auto cfg = load(g);
      const auto& a = seq_compile->parsed() ? compile_args : render_args;
      const auto c = compile_seq(cfg, a);
      const auto text = sequence::render(c);
      if (!a.output.empty()) write_text(a.output, text);
      if (seq_render->parsed()) std::cout << text;
      else print_summary(c, sequence::validate(c, cfg.pulse_gen));
      return 0;
    }
    if (seq_validate->parsed()) {
      const auto cfg = load(g);
      const auto c = sequence::parse(read_text(validate_path));
      const auto rep = sequence::validate(c, cfg.pulse_gen);
      print_findings(rep);
      return rep.ok() ? 0 : 1;
    }
    if (run->parsed()) {
      const auto cfg = load(g);
      engine::Lab lab(cfg);
      protocols::Calibrations cal;
      if (!calibration.empty()) {
        const auto rec = record::load_record(calibration);
        if (!rec.derived.count("pi_len")) fail(errc::dependency, "record '" + calibration + "' carries no pi_len");
        cal.pi_len = rec.derived.at("pi_len");
        cal.pi_source = rec.kind;
      }
      engine::RunContext ctx;
      const auto r = protocols::run_protocol(lab, run_kind, parse_params(run_params), cal, ctx);
      const auto dir = record::save_record(r, g.out);
      std::cout << "record=" << dir.string() << '\n';
      print_derived(r);
      return 0;
    }
    if (replay->parsed()) {
      const auto rec = record::load_record(replay_path);
      const auto out = protocols::replay(rec);
      if (out.match()) {
        std::cout << "MATCH\n";
        return 0;
      }
      std::cout << "MISMATCH\n";
      for (const auto& d : out.diffs) std::cout << d << '\n';
      return 1;
    }
    if (serve->parsed()) {
      const auto cfg = load(g);
      auto opt = service::Options::from(cfg.service);
      if (!endpoint.empty()) {
        const auto colon = endpoint.rfind(':');
        if (colon == std::string::npos) fail(errc::usage, "--endpoint expects host:port");
        opt.host = endpoint.substr(0, colon);
        opt.port = std::atoi(endpoint.c_str() + colon + 1);
      }
      if (http_port != -2) opt.http_port = http_port;
      if (!static_dir.empty()) opt.static_dir = static_dir;
      opt.out_dir = g.out;
      opt.realtime = !no_realtime;
      service::Service svc(cfg, opt);
      svc.start();
      std::signal(SIGINT, [](int) { g_quit = true; });
      std::signal(SIGTERM, [](int) { g_quit = true; });
      std::cout << "listening stream=" << opt.host << ':' << svc.port();
      if (svc.http_port() > 0) std::cout << " http=" << opt.host << ':' << svc.http_port();
      std::cout << std::endl;
      svc.run_forever(g_quit);
      svc.stop();
      return 0;
    }
    if (fit->parsed()) {
      std::filesystem::path p = fit_path;
      if (std::filesystem::is_directory(p)) p /= "trace.csv";
      const auto cols = record::parse_trace(read_text(p.string()));
      auto pick = [&](const std::string& name, std::size_t fallback) -> const record::Column& {
        if (name.empty()) {
          if (cols.size() <= fallback) fail(errc::data, "trace has fewer than " + std::to_string(fallback + 1) + " columns");
          return cols[fallback];
        }
        for (const auto& c : cols)
          if (c.name == name) return c;
        fail(errc::data, "trace has no column '" + name + "'");
      };
      const auto& x = pick(xcol, 0);
      const auto& y = pick(ycol, 1);
      std::vector<double> xs, ys;
      for (std::size_t i = 0; i < x.values.size(); ++i)
        if (std::isfinite(x.values[i]) && std::isfinite(y.values[i])) {
          xs.push_back(x.values[i]);
          ys.push_back(y.values[i]);
        }
      dsp::FitOptions opt;
      opt.max_dips = max_dips;
      opt.stretched = stretched;
      const auto f = dsp::fit(dsp::model_from_string(model), xs, ys, opt);
      std::cout << "model=" << dsp::to_string(f.model) << '\n' << "converged=" << (f.converged ? "true" : "false") << '\n';
      for (std::size_t i = 0; i < f.names.size(); ++i)
        std::cout << f.names[i] << '=' << record::fmt(f.params[i]) << " +- " << record::fmt(f.errors[i]) << '\n';
      std::cout << "residual_rms=" << record::fmt(f.residual_rms) << '\n';
      return f.converged ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << '\n';
    return e.code() == errc::usage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
