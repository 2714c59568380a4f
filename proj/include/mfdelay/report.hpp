#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mfdelay/config.hpp"
#include "mfdelay/errors.hpp"
#include "mfdelay/smp.hpp"
#include "mfdelay/stats.hpp"

namespace mfdelay {

/// Result of one named check. Wall-clock time is kept apart from the numeric
/// outputs so reruns produce identical report files.
struct ReportRecord {
  std::string check;
  std::string digest;
  json outputs = json::object();
  std::vector<std::string> warnings;
  bool pass = false;
  double wall_seconds = 0.0;

  json to_json() const {
    return json{{"check", check}, {"config_digest", digest}, {"pass", pass}, {"outputs", outputs}, {"warnings", warnings}};
  }
};

inline json to_json(const MeanEstimate& e) { return json{{"mean", e.mean}, {"stderr", e.stderr_}}; }

inline json to_json(const Verdict& v) {
  return json{{"name", v.name}, {"estimate", v.estimate}, {"stderr", v.stderr_}, {"tolerance", v.tolerance}, {"pass", v.pass}};
}

inline json to_json(const SlopeFit& f) {
  return json{{"slope", f.slope}, {"intercept", f.intercept}, {"ci95", {f.ci_low, f.ci_high}}, {"points", f.points}};
}

inline json to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

/// Shortest round-trip decimal form.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

/// Writes JSON and CSV artifacts into one directory, stamping each with the config digest.
class ReportWriter {
 public:
  ReportWriter(std::filesystem::path dir, std::string digest) : dir_(std::move(dir)), digest_(std::move(digest)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw ConfigError("cannot create output directory '" + dir_.string() + "': " + ec.message());
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }
  const std::string& digest() const noexcept { return digest_; }

  void write_json(const std::string& name, json j) const {
    if (j.is_object() && !j.contains("config_digest")) j["config_digest"] = digest_;
    std::ofstream out(dir_ / name);
    if (!out) throw ConfigError("cannot write '" + (dir_ / name).string() + "'");
    out << j.dump(2) << '\n';
  }

  /// Header row first; a leading config_digest column is added to every row.
  void write_csv(const std::string& name, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) const {
    std::ofstream out(dir_ / name);
    if (!out) throw ConfigError("cannot write '" + (dir_ / name).string() + "'");
    out << "config_digest";
    for (const auto& h : header) out << ',' << h;
    out << '\n';
    for (const auto& r : rows) {
      if (r.size() != header.size()) throw DimensionError("write_csv: row width differs from header");
      out << digest_;
      for (const auto& x : r) out << ',' << x;
      out << '\n';
    }
  }

  void write_csv(const std::string& name, const std::vector<std::string>& header,
                 const std::vector<std::vector<double>>& rows) const {
    std::vector<std::vector<std::string>> text;
    text.reserve(rows.size());
    for (const auto& r : rows) {
      std::vector<std::string> t;
      for (double x : r) t.push_back(format_number(x));
      text.push_back(std::move(t));
    }
    write_csv(name, header, text);
  }

 private:
  std::filesystem::path dir_;
  std::string digest_;
};

}  // namespace mfdelay
