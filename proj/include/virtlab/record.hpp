#pragma once

// Protocol records on disk: runs/<timestamp>_<kind>/{trace.csv, meta.txt, fit.txt}.
// trace.csv is a columnar numeric file with a typed header, meta.txt a
// line-oriented sidecar (config snapshot, params, derived values, checksum),
// fit.txt the timestamp-free fit summary.

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "virtlab/error.hpp"
#include "virtlab/fit.hpp"

namespace virtlab::record {

inline constexpr int kSchemaMajor = 1;
inline constexpr int kSchemaMinor = 0;

struct Column {
  std::string name;
  std::string unit;
  std::vector<double> values;
  bool operator==(const Column&) const = default;
};

struct NamedFit {
  std::string name;
  dsp::FitResult result;
};

struct Record {
  int schema_major = kSchemaMajor;
  int schema_minor = kSchemaMinor;
  std::string kind;
  std::string created;                        // UTC, informational only
  std::uint64_t seed = 0;
  std::string config;                         // YAML snapshot
  std::map<std::string, std::string> params;  // resolved, sufficient for replay
  std::vector<Column> columns;                // equal lengths; first column monotone
  std::vector<NamedFit> fits;
  std::map<std::string, double> derived;
  std::vector<std::string> warnings;
  bool partial = false;

  const Column& column(const std::string& name) const {
    for (const auto& c : columns)
      if (c.name == name) return c;
    fail(errc::data, "record has no column '" + name + "'");
  }
  const dsp::FitResult& fit_named(const std::string& name) const {
    for (const auto& f : fits)
      if (f.name == name) return f.result;
    fail(errc::data, "record has no fit '" + name + "'");
  }
  double value(const std::string& name) const {
    const auto it = derived.find(name);
    if (it == derived.end()) fail(errc::data, "record has no derived value '" + name + "'");
    return it->second;
  }
};

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline double parse_double(const std::string& s, const std::string& what) {
  if (s.empty()) fail(errc::integrity, what + ": empty number");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) fail(errc::integrity, what + ": bad number '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Escape newlines and backslashes so every value fits on one line.
inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '\\') o += "\\\\";
    else if (c == '\n') o += "\\n";
    else o += c;
  }
  return o;
}
inline std::string unescape(const std::string& s) {
  std::string o;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      o += s[i + 1] == 'n' ? '\n' : s[i + 1];
      ++i;
    } else {
      o += s[i];
    }
  }
  return o;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(errc::io, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trace files

inline std::string trace_header(const std::vector<Column>& cols) {
  std::string h = "# virtlab trace " + std::to_string(kSchemaMajor) + "." + std::to_string(kSchemaMinor) + "\n# units: ";
  for (std::size_t i = 0; i < cols.size(); ++i) h += (i ? "," : "") + (cols[i].unit.empty() ? std::string("1") : cols[i].unit);
  h += "\n";
  for (std::size_t i = 0; i < cols.size(); ++i) h += (i ? "," : "") + cols[i].name;
  return h + "\n";
}

inline std::string trace_row(const std::vector<double>& row) {
  std::string s;
  for (std::size_t i = 0; i < row.size(); ++i) s += (i ? "," : "") + fmt(row[i]);
  return s + "\n";
}

/// Append-only trace writer: the header first, then one flushed row at a time,
/// so a concurrent reader always sees a valid prefix.
class TraceWriter {
public:
  TraceWriter(const std::filesystem::path& path, const std::vector<Column>& layout) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) fail(errc::io, "cannot write " + path.string());
    width_ = layout.size();
    out_ << trace_header(layout);
    out_.flush();
  }
  void append(const std::vector<double>& row) {
    if (row.size() != width_) fail(errc::data, "trace row has " + std::to_string(row.size()) + " values, expected " + std::to_string(width_));
    if (rows_ > 0 && row[0] < last_first_) fail(errc::data, "trace first column must be non-decreasing");
    last_first_ = row[0];
    out_ << trace_row(row);
    out_.flush();
    ++rows_;
  }
  std::size_t rows() const { return rows_; }

private:
  std::ofstream out_;
  std::size_t width_ = 0;
  std::size_t rows_ = 0;
  double last_first_ = 0.0;
};

/// Parse trace text. With `prefix` set, a trailing partial line is ignored
/// (the file may still be growing); otherwise it is an integrity error.
inline std::vector<Column> parse_trace(const std::string& text, bool prefix = false) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# virtlab trace ", 0) != 0) fail(errc::integrity, "trace: missing header");
  if (!std::getline(in, line) || line.rfind("# units: ", 0) != 0) fail(errc::integrity, "trace: missing units line");
  const auto units = detail::split(line.substr(9), ',');
  if (!std::getline(in, line)) fail(errc::integrity, "trace: missing column names");
  const auto names = detail::split(line, ',');
  if (names.size() != units.size()) fail(errc::integrity, "trace: units and column names disagree");
  std::vector<Column> cols(names.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    cols[i].name = names[i];
    cols[i].unit = units[i] == "1" ? "" : units[i];
  }
  const bool ends_clean = !text.empty() && text.back() == '\n';
  std::size_t row = 0;
  while (std::getline(in, line)) {
    const bool last = in.peek() == std::char_traits<char>::eof();
    if (last && !ends_clean) {
      if (prefix) break;
      fail(errc::integrity, "trace: truncated final row");
    }
    const auto cells = detail::split(line, ',');
    if (cells.size() != cols.size()) {
      if (prefix && last) break;
      fail(errc::integrity, "trace: row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells");
    }
    for (std::size_t i = 0; i < cells.size(); ++i) cols[i].values.push_back(detail::parse_double(cells[i], "trace row " + std::to_string(row)));
    ++row;
  }
  return cols;
}

inline std::vector<Column> read_trace_prefix(const std::filesystem::path& p) { return parse_trace(detail::read_file(p), true); }

// ---------------------------------------------------------------------------
// Fit summary

inline std::string fit_text(const Record& r) {
  std::ostringstream os;
  os << "kind " << r.kind << "\n";
  os << "seed " << r.seed << "\n";
  os << "partial " << (r.partial ? 1 : 0) << "\n";
  for (const auto& f : r.fits) {
    const auto& x = f.result;
    os << "fit " << f.name << " " << dsp::to_string(x.model) << " converged " << (x.converged ? 1 : 0) << " iterations "
       << x.iterations << " residual_rms " << fmt(x.residual_rms) << "\n";
    for (std::size_t i = 0; i < x.params.size(); ++i)
      os << "  " << x.names[i] << " " << fmt(x.params[i]) << " " << fmt(i < x.errors.size() ? x.errors[i] : 0.0) << "\n";
  }
  for (const auto& [k, v] : r.derived) os << "derived " << k << " " << fmt(v) << "\n";
  for (const auto& w : r.warnings) os << "warning " << detail::escape(w) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Save / load

inline std::string trace_text(const Record& r) {
  std::size_t n = r.columns.empty() ? 0 : r.columns.front().values.size();
  for (const auto& c : r.columns)
    if (c.values.size() != n) fail(errc::data, "record column '" + c.name + "' length differs");
  std::string s = trace_header(r.columns);
  std::vector<double> row(r.columns.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = r.columns[j].values[i];
    s += trace_row(row);
  }
  return s;
}

inline std::string meta_text(const Record& r, const std::string& trace) {
  std::ostringstream os;
  os << "schema " << r.schema_major << "." << r.schema_minor << "\n";
  os << "kind " << r.kind << "\n";
  os << "created " << r.created << "\n";
  os << "seed " << r.seed << "\n";
  os << "partial " << (r.partial ? 1 : 0) << "\n";
  os << "rows " << (r.columns.empty() ? 0 : r.columns.front().values.size()) << "\n";
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016" PRIx64, detail::fnv1a(trace));
  os << "checksum fnv1a64 " << sum << "\n";
  for (const auto& [k, v] : r.params) os << "param " << k << " " << detail::escape(v) << "\n";
  for (const auto& [k, v] : r.derived) os << "derived " << k << " " << fmt(v) << "\n";
  for (const auto& f : r.fits) {
    const auto& x = f.result;
    os << "fit " << f.name << " " << dsp::to_string(x.model) << " " << (x.converged ? 1 : 0) << " " << (x.cancelled ? 1 : 0) << " "
       << x.iterations << " " << fmt(x.residual_rms) << "\n";
    for (std::size_t i = 0; i < x.params.size(); ++i)
      os << "fitparam " << f.name << " " << x.names[i] << " " << fmt(x.params[i]) << " " << fmt(i < x.errors.size() ? x.errors[i] : 0.0) << "\n";
  }
  for (const auto& w : r.warnings) os << "warning " << detail::escape(w) << "\n";
  os << "config " << detail::escape(r.config) << "\n";
  return os.str();
}

/// Write the record under `root`; returns the new directory.
inline std::filesystem::path save_record(const Record& r, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::string stamp = r.created;
  for (char& c : stamp)
    if (c == ':') c = '-';
  if (stamp.empty()) stamp = "undated";
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) fail(errc::io, "cannot create " + root.string() + ": " + ec.message());
  fs::path dir = root / (stamp + "_" + r.kind);
  for (int k = 2; fs::exists(dir); ++k) dir = root / (stamp + "-" + std::to_string(k) + "_" + r.kind);
  fs::create_directories(dir, ec);
  if (ec) fail(errc::io, "cannot create " + dir.string() + ": " + ec.message());
  const std::string trace = trace_text(r);
  auto write = [&](const char* name, const std::string& body) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot write " + (dir / name).string());
    out << body;
  };
  write("trace.csv", trace);
  write("fit.txt", fit_text(r));
  write("meta.txt", meta_text(r, trace));
  return dir;
}

inline Record load_record(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(errc::io, "no record directory at " + dir.string());
  const std::string meta = detail::read_file(dir / "meta.txt");
  const std::string trace = detail::read_file(dir / "trace.csv");
  Record r;
  std::size_t rows = 0;
  std::string checksum;
  bool newer = false;
  bool seen_schema = false;
  std::istringstream in(meta);
  std::string line;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    const auto where = "meta.txt line " + std::to_string(ln);
    if (!seen_schema) {
      if (key != "schema") fail(errc::integrity, where + ": expected schema line");
      int major = 0, minor = 0;
      if (std::sscanf(rest.c_str(), "%d.%d", &major, &minor) != 2) fail(errc::integrity, where + ": bad schema version");
      if (major != kSchemaMajor)
        fail(errc::migration, "record schema " + rest + " cannot be read by schema " + std::to_string(kSchemaMajor) + "." +
                                  std::to_string(kSchemaMinor) + " (major version differs)");
      r.schema_major = major;
      r.schema_minor = minor;
      newer = minor > kSchemaMinor;
      seen_schema = true;
      continue;
    }
    std::istringstream ls(rest);
    if (key == "kind") {
      r.kind = rest;
    } else if (key == "created") {
      r.created = rest;
    } else if (key == "seed") {
      r.seed = std::stoull(rest);
    } else if (key == "partial") {
      r.partial = rest == "1";
    } else if (key == "rows") {
      rows = static_cast<std::size_t>(std::stoull(rest));
    } else if (key == "checksum") {
      std::string algo;
      ls >> algo >> checksum;
    } else if (key == "param") {
      const auto s2 = rest.find(' ');
      r.params[rest.substr(0, s2)] = s2 == std::string::npos ? "" : detail::unescape(rest.substr(s2 + 1));
    } else if (key == "derived") {
      std::string k, v;
      ls >> k >> v;
      r.derived[k] = detail::parse_double(v, where);
    } else if (key == "fit") {
      std::string name, model, conv, canc, iters, rms;
      ls >> name >> model >> conv >> canc >> iters >> rms;
      NamedFit f;
      f.name = name;
      f.result.model = dsp::model_from_string(model);
      f.result.converged = conv == "1";
      f.result.cancelled = canc == "1";
      f.result.iterations = std::stoi(iters);
      f.result.residual_rms = detail::parse_double(rms, where);
      r.fits.push_back(std::move(f));
    } else if (key == "fitparam") {
      std::string name, pname, v, e;
      ls >> name >> pname >> v >> e;
      if (r.fits.empty() || r.fits.back().name != name) fail(errc::integrity, where + ": fit parameter without its fit");
      auto& x = r.fits.back().result;
      x.names.push_back(pname);
      x.params.push_back(detail::parse_double(v, where));
      x.errors.push_back(detail::parse_double(e, where));
    } else if (key == "warning") {
      r.warnings.push_back(detail::unescape(rest));
    } else if (key == "config") {
      r.config = detail::unescape(rest);
    } else if (!newer) {
      fail(errc::integrity, where + ": unknown entry '" + key + "'");
    }
  }
  if (!seen_schema) fail(errc::integrity, "meta.txt is empty");
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016" PRIx64, detail::fnv1a(trace));
  r.columns = parse_trace(trace);
  const std::size_t have = r.columns.empty() ? 0 : r.columns.front().values.size();
  if (have != rows) fail(errc::integrity, "trace.csv has " + std::to_string(have) + " rows, meta.txt says " + std::to_string(rows));
  if (checksum != sum) fail(errc::integrity, "trace.csv checksum mismatch");
  if (newer)
    r.warnings.push_back("record schema " + std::to_string(r.schema_major) + "." + std::to_string(r.schema_minor) +
                         " is newer than this reader (" + std::to_string(kSchemaMajor) + "." + std::to_string(kSchemaMinor) +
                         "); unknown entries ignored");
  return r;
}

/// Bitwise comparison of the replay-relevant content (NaN equals NaN).
inline std::vector<std::string> compare(const Record& a, const Record& b) {
  std::vector<std::string> diffs;
  auto same = [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0 || (std::isnan(x) && std::isnan(y)); };
  if (a.kind != b.kind) diffs.push_back("kind " + a.kind + " vs " + b.kind);
  for (const auto& [k, v] : a.derived) {
    const auto it = b.derived.find(k);
    if (it == b.derived.end()) diffs.push_back("derived " + k + " missing");
    else if (!same(v, it->second)) diffs.push_back("derived " + k + " " + fmt(v) + " vs " + fmt(it->second));
  }
  for (const auto& [k, v] : b.derived)
    if (!a.derived.count(k)) diffs.push_back("derived " + k + " unexpected");
  if (a.fits.size() != b.fits.size()) diffs.push_back("fit count differs");
  for (std::size_t i = 0; i < std::min(a.fits.size(), b.fits.size()); ++i) {
    const auto& x = a.fits[i].result;
    const auto& y = b.fits[i].result;
    if (x.params.size() != y.params.size()) {
      diffs.push_back("fit " + a.fits[i].name + " parameter count differs");
      continue;
    }
    for (std::size_t j = 0; j < x.params.size(); ++j)
      if (!same(x.params[j], y.params[j])) diffs.push_back("fit " + a.fits[i].name + " " + x.names[j] + " " + fmt(x.params[j]) + " vs " + fmt(y.params[j]));
  }
  if (a.columns.size() != b.columns.size()) diffs.push_back("column count differs");
  for (std::size_t i = 0; i < std::min(a.columns.size(), b.columns.size()); ++i) {
    const auto& x = a.columns[i].values;
    const auto& y = b.columns[i].values;
    if (x.size() != y.size()) {
      diffs.push_back("column " + a.columns[i].name + " length differs");
      continue;
    }
    for (std::size_t j = 0; j < x.size(); ++j)
      if (!same(x[j], y[j])) {
        diffs.push_back("column " + a.columns[i].name + " row " + std::to_string(j));
        break;
      }
  }
  return diffs;
}

}  // namespace virtlab::record
