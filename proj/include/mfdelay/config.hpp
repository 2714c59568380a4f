#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mfdelay/errors.hpp"
#include "mfdelay/forward_sim.hpp"
#include "mfdelay/models.hpp"
#include "mfdelay/regression.hpp"
#include "mfdelay/tensor.hpp"
#include "mfdelay/variation.hpp"

namespace mfdelay {

using json = nlohmann::json;

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Tolerances shared by all checks. Values are multiples of a Monte Carlo stderr
/// unless named otherwise.
struct Tolerances {
  double sigma = 3.0;
  double negative_sigma = 5.0;
  double smp_dt_multiple = 5.0;
  double picard_ratio = 0.5;
  std::size_t picard_max_iters = 10;
  double picard_tol = 1e-8;
  double tensor_slope_low = 0.7, tensor_slope_high = 1.3;
  double min_slope = 1.0;
};

/// One fully resolved problem instance: the base config with a check's overrides applied.
struct InstanceConfig {
  json raw;
  std::string model;
  ParamMap params;
  std::size_t n = 1, w = 1, m = 8;
  double d = 0.25, T = 0.5;
  std::vector<Vec> controls;
  std::vector<Vec> pieces;
  Vec x0;
  std::vector<Vec> segment;
  std::size_t N = 1000;
  std::uint64_t seed = 1;
  SpikeSpec spike;
  std::vector<double> epsilons;
  RegressionBasis::Kind basis = RegressionBasis::Kind::Default;
  std::size_t picard_iters = 20;
  double picard_tol = 1e-8;
  Tolerances tol;

  double dt() const { return d / static_cast<double>(m); }
  std::size_t K() const { return static_cast<std::size_t>(std::llround(T / dt())); }
  SegmentGrid grid() const { return SegmentGrid(n, m, d); }
  ControlSet admissible() const { return ControlSet::finite(controls); }
  LiftedCoefficients lifted() const { return make_lifted(model, params, grid(), w, admissible()); }
  ControlPath control() const { return ControlPath::piecewise(K(), dt(), pieces); }
  InitialSegment initial() const { return InitialSegment{x0, segment}; }
  NoiseBank noise() const { return NoiseBank(seed, dt(), w); }

  /// Optional extra field of the resolved JSON.
  template <class T>
  T get(const std::string& key, const T& fallback) const {
    const auto it = raw.find(key);
    return it == raw.end() ? fallback : it->template get<T>();
  }
};

namespace detail {

inline Vec vec_of(const json& j, const std::string& what) {
  if (j.is_number()) return Vec::Constant(1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError(what + ": expected a number or a nonempty array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + ": non-numeric entry");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline bool on_grid(double t, double dt) {
  const double r = t / dt;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, std::abs(r));
}

template <class T>
T field(const json& j, const char* key, const T& fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

inline Tolerances parse_tolerances(const json& j) {
  Tolerances t;
  if (!j.is_object()) return t;
  t.sigma = field(j, "sigma", t.sigma);
  t.negative_sigma = field(j, "negative_sigma", t.negative_sigma);
  t.smp_dt_multiple = field(j, "smp_dt_multiple", t.smp_dt_multiple);
  t.picard_ratio = field(j, "picard_ratio", t.picard_ratio);
  t.picard_max_iters = field(j, "picard_max_iters", t.picard_max_iters);
  t.picard_tol = field(j, "picard_tol", t.picard_tol);
  t.tensor_slope_low = field(j, "tensor_slope_low", t.tensor_slope_low);
  t.tensor_slope_high = field(j, "tensor_slope_high", t.tensor_slope_high);
  t.min_slope = field(j, "min_slope", t.min_slope);
  return t;
}

}  // namespace detail

/// Parses and validates one resolved instance. Throws ConfigError on any problem.
inline InstanceConfig parse_instance(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  InstanceConfig c;
  c.raw = j;
  const json model = j.value("model", json::object());
  c.model = detail::field<std::string>(model, "name", "lq_delay");
  const json params = model.value("params", json::object());
  if (!params.is_object()) throw ConfigError("model.params: expected an object");
  for (const auto& [k, v] : params.items()) {
    if (!v.is_number()) throw ConfigError("model parameter '" + k + "' must be numeric");
    c.params[k] = v.get<double>();
  }
  const json grid = j.value("grid", json::object());
  c.n = detail::field<std::size_t>(grid, "n", 1);
  c.w = detail::field<std::size_t>(grid, "w", 1);
  c.m = detail::field<std::size_t>(grid, "m", 8);
  c.d = detail::field<double>(grid, "d", 0.25);
  c.T = detail::field<double>(grid, "T", 0.5);
  if (c.n == 0 || c.w == 0 || c.m == 0) throw ConfigError("grid: n, w, m must be positive");
  if (!(c.d > 0.0) || !(c.T > 0.0)) throw ConfigError("grid: d and T must be positive");
  if (!detail::on_grid(c.T, c.dt())) throw ConfigError("grid: T must be a multiple of d/m");

  const json U = j.value("controls", json::array({0.0, 1.0}));
  if (!U.is_array() || U.empty()) throw ConfigError("controls: expected a nonempty array");
  for (const auto& u : U) c.controls.push_back(detail::vec_of(u, "controls"));
  const json pieces = j.value("control", json::object()).value("pieces", json::array({0.0}));
  if (!pieces.is_array() || pieces.empty()) throw ConfigError("control.pieces: expected a nonempty array");
  for (const auto& p : pieces) c.pieces.push_back(detail::vec_of(p, "control.pieces"));
  if (c.K() % c.pieces.size() != 0) throw ConfigError("control.pieces: piece count must divide the step count");
  const ControlSet cs = c.admissible();
  for (const auto& p : c.pieces)
    if (!cs.contains(p)) throw ConfigError("control.pieces: value outside the admissible set");

  const json init = j.value("initial", json::object());
  c.x0 = detail::vec_of(init.value("x0", json(1.0)), "initial.x0");
  const json seg = init.value("segment", json(1.0));
  if (seg.is_array() && seg.size() == c.m && seg[0].is_array()) {
    for (const auto& s : seg) c.segment.push_back(detail::vec_of(s, "initial.segment"));
  } else {
    c.segment.assign(c.m, detail::vec_of(seg, "initial.segment"));
  }
  if (static_cast<std::size_t>(c.x0.size()) != c.n) throw ConfigError("initial.x0: size must equal n");
  for (const auto& s : c.segment)
    if (static_cast<std::size_t>(s.size()) != c.n) throw ConfigError("initial.segment: size must equal n");

  c.N = detail::field<std::size_t>(j, "N", 1000);
  if (c.N < 2) throw ConfigError("N must be at least 2");
  c.seed = detail::field<std::uint64_t>(j, "seed", 1);

  const json spike = j.value("spike", json::object());
  c.spike.tau = detail::field<double>(spike, "tau", 0.0);
  c.spike.epsilon = detail::field<double>(spike, "epsilon", c.dt());
  c.spike.v = detail::vec_of(spike.value("v", json(1.0)), "spike.v");
  if (!detail::on_grid(c.spike.tau, c.dt()) || !detail::on_grid(c.spike.epsilon, c.dt()))
    throw ConfigError("spike: tau and epsilon must lie on the time grid");
  if (c.spike.tau + c.spike.epsilon > c.T + 1e-12) throw ConfigError("spike: extends beyond T");
  if (!cs.contains(c.spike.v)) throw ConfigError("spike.v: outside the admissible set");
  const json eps_list = j.value("epsilons", json::array());
  for (const auto& e : eps_list) {
    if (!e.is_number()) throw ConfigError("epsilons: non-numeric entry");
    const double eps = e.get<double>();
    if (!(eps > 0.0) || !detail::on_grid(eps, c.dt())) throw ConfigError("epsilons: entries must be positive grid multiples");
    if (c.spike.tau + eps > c.T + 1e-12) throw ConfigError("epsilons: spike extends beyond T");
    c.epsilons.push_back(eps);
  }

  c.basis = RegressionBasis::parse(detail::field<std::string>(j, "basis", "default"));
  const json picard = j.value("picard", json::object());
  c.picard_iters = detail::field<std::size_t>(picard, "iters", 20);
  c.picard_tol = detail::field<double>(picard, "tol", 1e-8);
  if (c.picard_iters == 0) throw ConfigError("picard.iters must be positive");
  c.tol = detail::parse_tolerances(j.value("tolerances", json::object()));

  (void)c.lifted();  // unknown model names and bad parameters surface here
  return c;
}

/// Top-level experiment file: a base instance plus per-check overrides.
struct ExperimentConfig {
  json base;                 ///< effective config, without the per-check section
  std::map<std::string, json> checks;
  std::string output_dir = "out";
  std::string digest;        ///< FNV-1a of the canonical effective config

  /// Base with the named check's overrides merged in (RFC 7386).
  json resolved(const std::string& check) const {
    json j = base;
    const auto it = checks.find(check);
    if (it != checks.end()) j.merge_patch(it->second);
    return j;
  }
  InstanceConfig instance(const std::string& check) const { return parse_instance(resolved(check)); }
};

/// `seed` overrides the file's seed (and every per-check seed) when given.
inline ExperimentConfig load_config(const json& file, const std::optional<std::uint64_t>& seed = std::nullopt) {
  if (!file.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  json j = file;
  if (seed) {
    j["seed"] = *seed;
    if (j.contains("checks"))
      for (auto& [k, v] : j["checks"].items())
        if (v.is_object() && v.contains("seed")) v.erase("seed");
  }
  c.digest = hex64(fnv1a64(j.dump()));
  if (j.contains("checks")) {
    if (!j["checks"].is_object()) throw ConfigError("checks: expected an object");
    for (const auto& [k, v] : j["checks"].items()) {
      if (!v.is_object()) throw ConfigError("checks." + k + ": expected an object");
      c.checks[k] = v;
    }
  }
  c.output_dir = detail::field<std::string>(j, "output", "out");
  j.erase("checks");
  c.base = j;
  return c;
}

inline ExperimentConfig load_config_file(const std::string& path,
                                         const std::optional<std::uint64_t>& seed = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return load_config(j, seed);
}

}  // namespace mfdelay
