#include "virtlab/service.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <regex>

namespace fs = std::filesystem;

namespace {

struct Out {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("virtlab_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Out cli(const std::string& args, const fs::path& cwd = fs::temp_directory_path(), const std::string& env = "") {
  const auto o = cwd / "stdout.txt", e = cwd / "stderr.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && " + env + " '" VIRTLAB_BIN "' " + args + " >'" + o.string() + "' 2>'" + e.string() + "'";
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(o), slurp(e)};
}

std::string only_record(const fs::path& root) {
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root)) dirs.push_back(d.path());
  EXPECT_EQ(dirs.size(), 1u);
  return dirs.empty() ? "" : dirs.front().string();
}

std::string value(const std::string& text, const std::string& key) {
  std::smatch m;
  if (std::regex_search(text, m, std::regex("(^|\n)" + key + "=([^\n]*)"))) return m[2];
  return "";
}

}  // namespace

TEST(Cli, HelpMatchesGoldenFile) {
  const auto r = cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, slurp(fs::path(VIRTLAB_GOLDEN) / "help.txt"));
  for (const char* word : {"optics", "report", "seq", "compile", "render", "validate", "run", "replay", "serve", "fit", "--config",
                           "--seed", "--out", "--param", "--endpoint", "--model"})
    EXPECT_NE(r.out.find(word), std::string::npos) << word;
}

TEST(Cli, UsageErrorsExitTwoWithOneLine) {
  for (const char* args : {"--bogus", "run", "fit x.csv", "run rabi --param nokey"}) {
    const auto r = cli(args);
    EXPECT_EQ(r.code, 2) << args;
    EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u) << args << ": " << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << args;
  }
}

TEST(Cli, ValidationErrorsExitOneWithNamedCode) {
  const auto dir = scratch("validation");
  const auto r = cli("--out runs run t1", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: dependency: ", 0), 0u) << r.err;
  const auto bad = cli("run rabi --param tau_stp=1", dir);
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(bad.err.rfind("error: config: ", 0), 0u) << bad.err;
  std::ofstream(dir / "bad.yaml") << "detecor: {}\n";
  const auto cfg = cli("--config bad.yaml optics report", dir);
  EXPECT_EQ(cfg.code, 1);
  EXPECT_NE(cfg.err.find("detecor"), std::string::npos) << cfg.err;
}

TEST(Cli, OpticsReportFromConfigAndEnvironment) {
  const auto dir = scratch("optics");
  std::ofstream(dir / "lab.yaml") << "optics:\n  na: 0.9\n  n_immersion: 1.0\n  pump_wavelength_nm: 637\n";
  const auto r = cli("--config lab.yaml optics report", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(std::stod(value(r.out, "r_min_nm")), 431.7, 0.1);
  EXPECT_NE(r.out.find("lateral resolution"), std::string::npos);
  const auto env = cli("optics report", dir, "VIRTLAB_CONFIG=lab.yaml");
  EXPECT_EQ(env.out, r.out);
}

TEST(Cli, RunIsDeterministicAndReplays) {
  const auto dir = scratch("run");
  const auto a = cli("run rabi --seed 7 --out a --param points=21", dir);
  const auto b = cli("run rabi --seed 7 --out b --param points=21", dir);
  const auto c = cli("run rabi --seed 8 --out c --param points=21", dir);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  const auto ra = only_record(dir / "a"), rb = only_record(dir / "b"), rc = only_record(dir / "c");
  EXPECT_EQ(slurp(fs::path(ra) / "fit.txt"), slurp(fs::path(rb) / "fit.txt"));
  EXPECT_NE(slurp(fs::path(ra) / "fit.txt"), slurp(fs::path(rc) / "fit.txt"));
  EXPECT_EQ(value(a.out, "record"), "a/" + fs::path(ra).filename().string());

  const auto rep = cli("replay '" + ra + "'", dir);
  EXPECT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(rep.out, "MATCH\n");

  // a calibration record feeds the pi-dependent protocols
  const auto ram = cli("--seed 7 --out r run ramsey --param points=40 --calibration '" + ra + "'", dir);
  ASSERT_EQ(ram.code, 0) << ram.err;
  EXPECT_NEAR(std::stod(value(ram.out, "detuning")), 2e6, 0.04e6);
  EXPECT_EQ(cli("replay '" + only_record(dir / "r") + "'", dir).out, "MATCH\n");

  // tampering is detected
  auto meta = slurp(fs::path(ra) / "meta.txt");
  const auto pos = meta.find("derived pi_len ");
  ASSERT_NE(pos, std::string::npos);
  const auto eol = meta.find('\n', pos);
  meta.replace(pos, eol - pos, "derived pi_len 1.01e-07");
  std::ofstream(fs::path(ra) / "meta.txt", std::ios::trunc) << meta;
  const auto bad = cli("replay '" + ra + "'", dir);
  EXPECT_NE(bad.code, 0);
}

TEST(Cli, FitSubcommandRefitsARecord) {
  const auto dir = scratch("fit");
  ASSERT_EQ(cli("--out runs run rabi --param points=31", dir).code, 0);
  const auto rec = only_record(dir / "runs");
  const auto r = cli("fit '" + rec + "' --model damped_cosine --x tau --y signal_s0", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(std::stod(value(r.out, "frequency").substr(0, value(r.out, "frequency").find(' '))), 5e6, 0.1e6);
  EXPECT_EQ(cli("fit '" + rec + "' --model sinc", dir).code, 1);
}

TEST(Cli, SequenceCompileRenderValidate) {
  const auto dir = scratch("seq");
  const auto c = cli("seq compile hahn_echo --sweep 0:1e-6:10 --pi-len 100e-9 --sync method1 --averaging pn -o h.txt", dir);
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(value(c.out, "sync_edges"), "2");
  EXPECT_EQ(value(c.out, "readout_windows"), "10");
  EXPECT_EQ(value(c.out, "valid"), "true");
  const auto r = cli("seq render hahn_echo --sweep 0:1e-6:10 --pi-len 100e-9 --sync method1 --averaging pn", dir);
  EXPECT_EQ(r.out, slurp(dir / "h.txt"));
  EXPECT_EQ(cli("seq validate h.txt", dir).code, 0);
  std::ofstream(dir / "broken.txt") << "kind rabi\nP two\n";
  const auto v = cli("seq validate broken.txt", dir);
  EXPECT_EQ(v.code, 1);
  EXPECT_EQ(v.err.rfind("error: parse: ", 0), 0u) << v.err;
  const auto missing = cli("seq compile ramsey --sweep 0,1e-7", dir);
  EXPECT_EQ(missing.code, 1);
  EXPECT_EQ(missing.err.rfind("error: spec: ", 0), 0u) << missing.err;
}

TEST(Cli, ServeAnswersCommandsAndServesAssets) {
  const auto dir = scratch("serve");
  fs::create_directories(dir / "ui");
  std::ofstream(dir / "ui" / "index.html") << "<p>ui</p>";
  int pipefd[2];
  ASSERT_EQ(pipe(pipefd), 0);
  const pid_t pid = fork();
  if (pid == 0) {
    dup2(pipefd[1], 1);
    ::close(pipefd[0]);
    if (::chdir(dir.c_str()) != 0) _exit(126);
    execl(VIRTLAB_BIN, "virtlab", "--out", "runs", "serve", "--endpoint", "127.0.0.1:0", "--http-port", "0", "--static", "ui",
          "--no-realtime", static_cast<char*>(nullptr));
    _exit(127);
  }
  ::close(pipefd[1]);
  std::string line;
  char ch;
  while (::read(pipefd[0], &ch, 1) == 1 && ch != '\n') line += ch;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(line, m, std::regex("stream=127\\.0\\.0\\.1:(\\d+) http=127\\.0\\.0\\.1:(\\d+)"))) << line;
  const int port = std::stoi(m[1]), http_port = std::stoi(m[2]);
  {
    virtlab::service::Client c("127.0.0.1", port);
    const auto st = c.request("status");
    EXPECT_EQ(st["body"]["state"], "idle");
    httplib::Client http("127.0.0.1", http_port);
    const auto res = http.Get("/index.html");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->body, "<p>ui</p>");
  }
  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  ::close(pipefd[0]);
  EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
}
