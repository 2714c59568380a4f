#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mfdelay/adjoint.hpp"
#include "mfdelay/config.hpp"
#include "mfdelay/forward_sim.hpp"
#include "mfdelay/report.hpp"
#include "mfdelay/smp.hpp"
#include "mfdelay/stats.hpp"
#include "mfdelay/tensor.hpp"
#include "mfdelay/variation.hpp"

namespace mfdelay {

// ------------------------------------------------------------------------------------
// brute-force oracle

/// Piecewise-constant controls over a finite U_ad.
struct ControlLattice {
  std::size_t K = 0;
  double dt = 0.0;
  std::size_t pieces = 4;
};

inline constexpr std::size_t kMaxLatticeCandidates = 10000;

struct BruteForceCandidate {
  std::vector<Vec> pieces;
  MeanEstimate J;
  MeanEstimate gap;  ///< J - J_best, paired over particles
};

struct BruteForceResult {
  std::vector<BruteForceCandidate> table;
  std::size_t best = 0;
  std::vector<std::size_t> ties;  ///< candidates whose gap is within 2 paired stderr of zero
  ControlPath control;
};

inline std::size_t lattice_size(std::size_t values, std::size_t pieces) {
  std::size_t c = 1;
  for (std::size_t p = 0; p < pieces; ++p) {
    if (c > kMaxLatticeCandidates / std::max<std::size_t>(values, 1)) return kMaxLatticeCandidates + 1;
    c *= values;
  }
  return c;
}

/// Exhaustive search with one noise bank shared by every candidate.
inline BruteForceResult brute_force_optimal(const LiftedCoefficients& lc, const InitialSegment& X0,
                                            const ControlLattice& lat, std::size_t N, const NoiseBank& noise,
                                            const ParallelOptions& par = {}) {
  const ControlSet& U = lc.coeffs().admissible();
  if (!U.is_finite()) throw ConfigError("brute_force_optimal: U_ad must be finite");
  if (lat.pieces == 0 || lat.K % lat.pieces != 0) throw ConfigError("brute_force_optimal: pieces must divide K");
  const std::size_t V = U.points.size();
  const std::size_t C = lattice_size(V, lat.pieces);
  if (C > kMaxLatticeCandidates) throw ConfigError("brute_force_optimal: lattice exceeds 10^4 candidates");
  if (static_cast<double>(C) * static_cast<double>(N) > 2e8)
    throw ConfigError("brute_force_optimal: lattice too large for the particle count");

  BruteForceResult out;
  std::vector<std::vector<double>> costs(C);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c) {
    BruteForceCandidate cand;
    std::size_t code = c;
    cand.pieces.resize(lat.pieces);
    for (std::size_t p = lat.pieces; p-- > 0;) {
      cand.pieces[p] = U.points[code % V];
      code /= V;
    }
    const ControlPath u = ControlPath::piecewise(lat.K, lat.dt, cand.pieces);
    const Ensemble e = simulate(lc, X0, u, N, noise, par);
    costs[c] = particle_costs(lc, e, u, par);
    cand.J = mean_estimate(costs[c]);
    if (cand.J.mean < best) best = cand.J.mean, out.best = c;
    out.table.push_back(std::move(cand));
  }
  std::vector<double> d(N);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < N; ++i) d[i] = costs[c][i] - costs[out.best][i];
    out.table[c].gap = mean_estimate(d);
    if (std::abs(out.table[c].gap.mean) <= 2.0 * out.table[c].gap.stderr_) out.ties.push_back(c);
  }
  out.control = ControlPath::piecewise(lat.K, lat.dt, out.table[out.best].pieces);
  return out;
}

// ------------------------------------------------------------------------------------
// checks

struct RunOptions {
  ParallelOptions par;
  bool dump_trajectories = false;
};

namespace checks {

inline std::string num(double x) { return format_number(x); }

inline ReportRecord simulate_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  const auto lc = c.lifted();
  const ControlPath u = c.control();
  const Ensemble e = simulate(lc, c.initial(), u, c.N, c.noise(), o.par);
  const CostEstimate J = evaluate_cost(lc, e, u, o.par);
  std::vector<std::string> header{"step", "t"};
  for (std::size_t i = 0; i < c.n; ++i) header.push_back("mean_x" + std::to_string(i));
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k <= e.K; ++k) {
    std::vector<double> r{static_cast<double>(k), e.time(k)};
    for (std::size_t i = 0; i < c.n; ++i) r.push_back(e.mean_window(k).head[i]);
    rows.push_back(std::move(r));
  }
  w.write_csv("mean_path.csv", header, rows);
  if (o.dump_trajectories) {
    const std::size_t P = std::min(c.N, c.get<std::size_t>("dump_particles", 100));
    std::vector<std::string> th{"particle", "step", "t"};
    for (std::size_t i = 0; i < c.n; ++i) th.push_back("x" + std::to_string(i));
    std::vector<std::vector<double>> tr;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t k = 0; k <= e.K; ++k) {
        std::vector<double> r{static_cast<double>(p), static_cast<double>(k), e.time(k)};
        for (std::size_t i = 0; i < c.n; ++i) r.push_back(e.window(p, k).head[i]);
        tr.push_back(std::move(r));
      }
    w.write_csv("trajectories.csv", th, tr);
  }
  ReportRecord r;
  r.outputs = {{"J", J.J}, {"stderr", J.stderr_}, {"N", c.N}, {"K", e.K}, {"mean_path_rows", rows.size()}};
  r.pass = std::isfinite(J.J) && std::isfinite(J.stderr_);
  return r;
}

inline ReportRecord orders_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  const auto lc = c.lifted();
  const int j = c.get<int>("order_j", 1);
  const std::size_t reps = c.get<std::size_t>("replicates", 1);
  std::vector<std::uint64_t> seeds;
  for (std::size_t r = 0; r < reps; ++r) seeds.push_back(c.seed + r);
  const auto rep = order_probe(lc, c.initial(), c.control(), c.spike.tau, c.spike.v, c.epsilons, j, c.N, seeds, o.par);
  ReportRecord r;
  r.pass = true;
  json sums = json::array();
  for (const auto& s : rep.summaries) {
    json js{{"quantity", s.quantity}, {"expected", s.expected}, {"slope", s.slope}, {"ci95", {s.ci_low, s.ci_high}},
            {"band", {s.lower, std::isfinite(s.upper) ? json(s.upper) : json(nullptr)}}, {"degenerate", s.degenerate},
            {"pass", s.pass}, {"warnings", s.warnings}};
    w.write_json("orders_" + s.quantity + ".json", js);
    sums.push_back(js);
    r.pass = r.pass && s.pass;
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& row : rep.rows) rows.push_back({row.quantity, num(row.epsilon), num(row.value), num(row.stderr_)});
  w.write_csv("orders.csv", {"quantity", "epsilon", "value", "stderr"}, rows);
  r.outputs = {{"j", j}, {"epsilons", c.epsilons}, {"summaries", sums}};
  return r;
}

inline ReportRecord picard_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  const auto lc = c.lifted();
  const ControlPath u = c.control();
  const Ensemble e = simulate(lc, c.initial(), u, c.N, c.noise(), o.par);
  const auto fo = solve_first_order(lc, e, u, FirstOrderOptions{c.picard_iters, c.picard_tol, c.basis}, o.par);
  const auto& res = fo.report.residuals;
  double max_ratio = 0.0;
  std::vector<double> ratios;
  for (std::size_t i = 1; i < res.size(); ++i) {
    if (!(res[i - 1] > 1e-14)) break;
    ratios.push_back(res[i] / res[i - 1]);
    max_ratio = std::max(max_ratio, ratios.back());
  }
  const double final_res = res.empty() ? std::numeric_limits<double>::infinity() : res.back();
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < res.size(); ++i) rows.push_back({static_cast<double>(i + 2), res[i]});
  w.write_csv("picard.csv", {"pass", "residual"}, rows);
  std::vector<std::string> header{"step", "t"};
  for (std::size_t i = 0; i < c.n; ++i) header.push_back("p" + std::to_string(i));
  for (std::size_t j = 0; j < c.w; ++j)
    for (std::size_t i = 0; i < c.n; ++i) header.push_back("q" + std::to_string(j) + "_" + std::to_string(i));
  std::vector<std::vector<double>> am;
  for (std::size_t k = 0; k < e.K; ++k) {
    std::vector<double> r{static_cast<double>(k), e.time(k)};
    const Vec pm = fo.path.pred_mean(k);
    const Mat qm = fo.path.q_mean(k);
    for (Eigen::Index i = 0; i < pm.size(); ++i) r.push_back(pm[i]);
    for (Eigen::Index j = 0; j < qm.cols(); ++j)
      for (Eigen::Index i = 0; i < qm.rows(); ++i) r.push_back(qm(i, j));
    am.push_back(std::move(r));
  }
  w.write_csv("adjoint_mean.csv", header, am);
  ReportRecord r;
  r.outputs = {{"residuals", res},
               {"ratios", ratios},
               {"max_ratio", max_ratio},
               {"iterations", fo.report.iterations},
               {"converged", fo.report.converged},
               {"final_residual", final_res},
               {"contraction_certificate", fo.report.contraction_certificate}};
  r.warnings = fo.report.warnings;
  r.pass = fo.report.converged && fo.report.iterations <= c.tol.picard_max_iters && final_res <= c.tol.picard_tol &&
           max_ratio <= c.tol.picard_ratio;
  return r;
}

/// The instance with its model section replaced.
inline InstanceConfig with_model(const InstanceConfig& c, const json& model) {
  json r = c.raw;
  r["model"] = model;
  return parse_instance(r);
}

inline ReportRecord duality_first_order_check(const InstanceConfig& c, const ReportWriter&, const RunOptions& o) {
  std::vector<json> models;
  if (c.raw.contains("models"))
    for (const auto& m : c.raw["models"]) models.push_back(m);
  else
    models.push_back(c.raw.value("model", json::object()));
  ReportRecord r;
  r.pass = true;
  json per = json::array();
  for (const auto& m : models) {
    const InstanceConfig ci = with_model(c, m);
    const auto lc = ci.lifted();
    const ControlPath u = ci.control();
    const auto vb = simulate_variations(lc, ci.initial(), u, ci.spike, ci.N, ci.noise(), o.par);
    const auto fo = solve_first_order(lc, vb.X, u, FirstOrderOptions{ci.picard_iters, ci.picard_tol, ci.basis}, o.par);
    const auto d = duality_check_first_order(lc, vb, fo.path, o.par);
    per.push_back({{"model", ci.model},
                   {"Y", {{"lhs", to_json(d.y.lhs)}, {"rhs", to_json(d.y.rhs)}, {"verdict", to_json(d.y.verdict)}}},
                   {"Z", {{"lhs", to_json(d.z.lhs)}, {"rhs", to_json(d.z.rhs)}, {"verdict", to_json(d.z.verdict)}}},
                   {"picard_iterations", fo.report.iterations}});
    r.pass = r.pass && d.y.verdict.pass && d.z.verdict.pass;
    for (const auto& wmsg : fo.report.warnings) r.warnings.push_back(ci.model + ": " + wmsg);
  }
  r.outputs = {{"models", per}};
  return r;
}

inline std::size_t step_of(const InstanceConfig& c, double t, const char* what) {
  if (!detail::on_grid(t, c.dt()) || t < 0.0 || t > c.T + 1e-12)
    throw ConfigError(std::string(what) + ": time must lie on the grid within [0, T]");
  return static_cast<std::size_t>(std::llround(t / c.dt()));
}

inline ReportRecord dual_family_check(const InstanceConfig& c, const ReportWriter&, const RunOptions& o) {
  const auto lc = c.lifted();
  const ControlPath u = c.control();
  const auto times = c.get<std::vector<double>>("family_times", {c.T / 2, 3 * c.T / 4, c.T});
  const auto vb = simulate_variations(lc, c.initial(), u, c.spike, c.N, c.noise(), o.par);
  const Mat I = Mat::Identity(static_cast<Eigen::Index>(lc.grid().dim()), static_cast<Eigen::Index>(lc.grid().dim()));
  ReportRecord r;
  r.pass = true;
  json per = json::array();
  for (double t : times) {
    const std::size_t s = step_of(c, t, "family_times");
    const auto fam = solve_dual_family(lc, vb.X, u, s, I);
    for (const auto& rep : mfdelay::dual_family_check(lc, vb, fam, o.par)) {
      per.push_back({{"s", s}, {"t", t}, {"lhs", to_json(rep.lhs)}, {"rhs", to_json(rep.rhs)}, {"verdict", to_json(rep.verdict)}});
      r.pass = r.pass && rep.verdict.pass;
    }
  }
  r.outputs = {{"family", per}};
  return r;
}

inline ReportRecord second_order_slope_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  if (c.epsilons.size() < 3) throw ConfigError("second_order_slope: need at least 3 epsilons");
  const auto lc = c.lifted();
  const ControlPath u = c.control();
  std::vector<std::pair<double, double>> pairs;
  std::vector<std::vector<double>> rows;
  json per = json::array();
  double defect = 0.0;
  for (double eps : c.epsilons) {
    SpikeSpec s = c.spike;
    s.epsilon = eps;
    const auto vb = simulate_variations(lc, c.initial(), u, s, c.N, c.noise(), o.par);
    const auto fo = solve_first_order(lc, vb.X, u, FirstOrderOptions{c.picard_iters, c.picard_tol, c.basis}, o.par);
    const auto P2 = solve_second_order(lc, vb.X, u, &fo.path);
    defect = std::max(defect, P2.max_symmetry_defect);
    const auto d = duality_check_second_order(lc, vb, P2, &fo.path, o.par);
    const auto& v = d.full.verdict;
    pairs.emplace_back(eps, std::abs(v.estimate));
    rows.push_back({eps, d.full.lhs.mean, d.full.rhs.mean, v.estimate, v.stderr_});
    per.push_back({{"epsilon", eps}, {"lhs", to_json(d.full.lhs)}, {"rhs", to_json(d.full.rhs)},
                   {"residual", v.estimate}, {"residual_stderr", v.stderr_}});
  }
  w.write_csv("second_order.csv", {"epsilon", "lhs", "rhs", "residual", "residual_stderr"}, rows);
  const SlopeFit fit = fit_loglog_slope(pairs);
  ReportRecord r;
  r.outputs = {{"rows", per}, {"residual_slope", to_json(fit)}, {"min_slope", c.tol.min_slope},
               {"max_symmetry_defect", defect}};
  r.warnings = fit.warnings;
  r.pass = fit.slope > c.tol.min_slope;
  return r;
}

inline ReportRecord second_order_leading_check(const InstanceConfig& c, const ReportWriter&, const RunOptions& o) {
  const auto lc = c.lifted();
  const ControlPath u = c.control();
  const auto vb = simulate_variations(lc, c.initial(), u, c.spike, c.N, c.noise(), o.par);
  const auto fo = solve_first_order(lc, vb.X, u, FirstOrderOptions{c.picard_iters, c.picard_tol, c.basis}, o.par);
  const auto P2 = solve_second_order(lc, vb.X, u, &fo.path);
  const auto d = duality_check_second_order(lc, vb, P2, &fo.path, o.par);
  Verdict v = within_sigma("second_order_leading", MeanEstimate{d.lead.verdict.estimate, d.lead.verdict.stderr_},
                           c.tol.sigma);
  ReportRecord r;
  r.outputs = {{"lhs", to_json(d.lead.lhs)}, {"rhs", to_json(d.lead.rhs)}, {"verdict", to_json(v)}};
  r.pass = v.pass;
  return r;
}

inline ReportRecord tensor_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  const auto levels = c.get<std::vector<std::size_t>>("levels", {8, 16, 32});
  if (levels.size() < 3) throw ConfigError("tensor: need at least 3 grid levels");
  std::vector<std::pair<double, double>> pairs;
  std::vector<std::vector<double>> lrows;
  json per = json::array();
  TensorCheckReport finest;
  double finest_dt = 0.0, defect = 0.0;
  for (std::size_t m : levels) {
    json rj = c.raw;
    rj["grid"]["m"] = m;
    const InstanceConfig ci = parse_instance(rj);
    const auto lc = ci.lifted();
    const auto vb = simulate_variations(lc, ci.initial(), ci.control(), ci.spike, ci.N, ci.noise(), o.par);
    auto rep = tensor_identity_check(lc, vb, o.par);
    const double sig = rep.sigma_outer[rep.argmax_step];
    pairs.emplace_back(ci.dt(), rep.max_discrepancy);
    lrows.push_back({static_cast<double>(m), ci.dt(), rep.max_discrepancy, sig, ci.dt() * static_cast<double>(rep.argmax_step)});
    per.push_back({{"m", m}, {"dt", ci.dt()}, {"max_discrepancy", rep.max_discrepancy},
                   {"argmax_t", ci.dt() * static_cast<double>(rep.argmax_step)}, {"sigma_at_argmax", sig},
                   {"max_symmetry_defect", rep.max_symmetry_defect}});
    defect = std::max(defect, rep.max_symmetry_defect);
    finest = std::move(rep);
    finest_dt = ci.dt();
  }
  w.write_csv("tensor_levels.csv", {"m", "dt", "max_discrepancy", "sigma_at_argmax", "argmax_t"}, lrows);
  std::vector<std::vector<double>> srows;
  for (std::size_t k = 0; k < finest.discrepancy.size(); ++k)
    srows.push_back({static_cast<double>(k), finest_dt * static_cast<double>(k), finest.discrepancy[k],
                     finest.sigma_outer[k], finest.sigma_diff[k]});
  w.write_csv("tensor_steps.csv", {"step", "t", "discrepancy", "sigma_outer", "sigma_diff"}, srows);
  const SlopeFit fit = fit_loglog_slope(pairs);
  const double sig = finest.sigma_outer[finest.argmax_step];
  const bool slope_ok = fit.slope >= c.tol.tensor_slope_low && fit.slope <= c.tol.tensor_slope_high;
  const bool fine_ok = finest.max_discrepancy <= c.tol.sigma * sig;
  ReportRecord r;
  r.outputs = {{"levels", per},
               {"refinement_slope", to_json(fit)},
               {"slope_band", {c.tol.tensor_slope_low, c.tol.tensor_slope_high}},
               {"finest", {{"max_discrepancy", finest.max_discrepancy}, {"sigma", sig}, {"tolerance", c.tol.sigma * sig}}},
               {"max_symmetry_defect", defect}};
  r.warnings = fit.warnings;
  r.pass = slope_ok && fine_ok;
  return r;
}

/// Interior steps of a piecewise-constant control: the first and last step of every piece are excluded.
inline std::vector<bool> interior_steps(std::size_t K, std::size_t pieces) {
  std::vector<bool> in(K, false);
  const std::size_t L = K / pieces;
  for (std::size_t k = 0; k < K; ++k) in[k] = L > 2 && k % L != 0 && k % L != L - 1;
  return in;
}

struct SmpScan {
  std::vector<SmpCell> cells;
  double min_mean = std::numeric_limits<double>::infinity();
  double min_stderr = 0.0;
  std::size_t min_step = 0;
  double min_z = std::numeric_limits<double>::infinity();  ///< most negative mean/stderr
};

inline SmpScan smp_scan(const LiftedCoefficients& lc, const InstanceConfig& c, const ControlPath& u,
                        const std::vector<bool>& interior, const RunOptions& o) {
  const Ensemble e = simulate(lc, c.initial(), u, c.N, c.noise(), o.par);
  const auto fo = solve_first_order(lc, e, u, FirstOrderOptions{c.picard_iters, c.picard_tol, c.basis}, o.par);
  const auto P2 = solve_second_order(lc, e, u, &fo.path);
  SmpScan s;
  s.cells = smp_table(lc, e, fo.path, P2, o.par);
  for (const auto& cell : s.cells) {
    if (!interior[cell.step] || cell.v == u.values[cell.step]) continue;
    const double lo = cell.residual.mean;
    if (lo < s.min_mean) s.min_mean = lo, s.min_stderr = cell.residual.stderr_, s.min_step = cell.step;
    if (cell.residual.stderr_ > 0.0) s.min_z = std::min(s.min_z, cell.residual.mean / cell.residual.stderr_);
  }
  return s;
}

inline ReportRecord smp_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  const auto lc = c.lifted();
  const std::size_t pieces = c.get<std::size_t>("lattice_pieces", 4);
  const BruteForceResult bf = brute_force_optimal(lc, c.initial(), ControlLattice{c.K(), c.dt(), pieces}, c.N, c.noise(), o.par);
  const auto interior = interior_steps(c.K(), pieces);
  if (std::none_of(interior.begin(), interior.end(), [](bool b) { return b; }))
    throw ConfigError("smp: pieces too short to have interior steps");

  // perturbation: the single-piece change with the largest cost increase
  std::size_t worst = bf.best;
  for (std::size_t i = 0; i < bf.table.size(); ++i) {
    std::size_t diff = 0;
    for (std::size_t p = 0; p < pieces; ++p) diff += bf.table[i].pieces[p] != bf.table[bf.best].pieces[p];
    if (diff == 1 && (worst == bf.best || bf.table[i].J.mean > bf.table[worst].J.mean)) worst = i;
  }
  const ControlPath pert = ControlPath::piecewise(c.K(), c.dt(), bf.table[worst].pieces);

  const SmpScan opt = smp_scan(lc, c, bf.control, interior, o);
  const SmpScan neg = smp_scan(lc, c, pert, interior, o);
  const double allowance = c.tol.sigma * opt.min_stderr + c.tol.smp_dt_multiple * c.dt();
  const bool opt_ok = opt.min_mean >= -allowance;
  const bool neg_ok = neg.min_z < -c.tol.negative_sigma;

  std::vector<std::vector<std::string>> bt;
  std::vector<std::string> bh{"candidate"};
  for (std::size_t p = 0; p < pieces; ++p) bh.push_back("piece" + std::to_string(p));
  for (const char* h : {"J", "stderr", "gap", "gap_stderr"}) bh.push_back(h);
  for (std::size_t i = 0; i < bf.table.size(); ++i) {
    std::vector<std::string> row{std::to_string(i)};
    for (const auto& v : bf.table[i].pieces) row.push_back(num(v[0]));
    for (double x : {bf.table[i].J.mean, bf.table[i].J.stderr_, bf.table[i].gap.mean, bf.table[i].gap.stderr_})
      row.push_back(num(x));
    bt.push_back(std::move(row));
  }
  w.write_csv("brute_force.csv", bh, bt);
  std::vector<std::vector<double>> st;
  for (int which = 0; which < 2; ++which)
    for (const auto& cell : (which == 0 ? opt : neg).cells)
      st.push_back({static_cast<double>(which), static_cast<double>(cell.step), c.dt() * static_cast<double>(cell.step),
                    cell.v[0], cell.residual.mean, cell.residual.stderr_, interior[cell.step] ? 1.0 : 0.0});
  w.write_csv("smp_residuals.csv", {"perturbed", "step", "t", "v", "mean", "stderr", "interior"}, st);

  auto pieces_json = [](const std::vector<Vec>& ps) {
    json a = json::array();
    for (const auto& v : ps) a.push_back(to_json(v));
    return a;
  };
  ReportRecord r;
  r.outputs = {{"candidates", bf.table.size()},
               {"argmin", bf.best},
               {"argmin_pieces", pieces_json(bf.table[bf.best].pieces)},
               {"argmin_J", to_json(bf.table[bf.best].J)},
               {"ties", bf.ties},
               {"optimal", {{"min_residual", opt.min_mean}, {"stderr", opt.min_stderr}, {"step", opt.min_step},
                            {"allowance", allowance}, {"pass", opt_ok}}},
               {"perturbed", {{"pieces", pieces_json(bf.table[worst].pieces)}, {"min_z", neg.min_z},
                              {"threshold", -c.tol.negative_sigma}, {"pass", neg_ok}}}};
  if (bf.ties.size() > 1) r.warnings.push_back("brute-force argmin is not unique within 2 paired stderr");
  r.pass = opt_ok && neg_ok;
  return r;
}

inline ReportRecord cost_expansion_check(const InstanceConfig& c, const ReportWriter& w, const RunOptions& o) {
  if (c.epsilons.size() < 3) throw ConfigError("cost_expansion: need at least 3 epsilons");
  const auto lc = c.lifted();
  const auto rep = mfdelay::cost_expansion_check(lc, c.initial(), c.control(), c.spike.tau, c.spike.v, c.epsilons,
                                                 c.N, c.seed, o.par);
  std::vector<std::vector<double>> rows;
  json per = json::array();
  for (const auto& row : rep.rows) {
    rows.push_back({row.epsilon, row.dJ.mean, row.dJ.stderr_, row.rhs.mean, row.residual.mean, row.residual.stderr_});
    per.push_back({{"epsilon", row.epsilon}, {"dJ", to_json(row.dJ)}, {"rhs", to_json(row.rhs)},
                   {"residual", to_json(row.residual)}, {"pass", row.pass}});
  }
  w.write_csv("cost_expansion.csv", {"epsilon", "dJ", "dJ_stderr", "rhs", "residual", "residual_stderr"}, rows);
  ReportRecord r;
  r.outputs = {{"rows", per}, {"residual_slope", to_json(rep.residual_slope)}, {"min_slope", c.tol.min_slope}};
  r.warnings = rep.residual_slope.warnings;
  r.pass = rep.all_within && rep.residual_slope.slope > c.tol.min_slope;
  return r;
}

using CheckFn = std::function<ReportRecord(const InstanceConfig&, const ReportWriter&, const RunOptions&)>;

inline const std::vector<std::pair<std::string, CheckFn>>& registry() {
  static const std::vector<std::pair<std::string, CheckFn>> r{
      {"simulate", simulate_check},
      {"orders", orders_check},
      {"picard", picard_check},
      {"duality_first_order", duality_first_order_check},
      {"dual_family", dual_family_check},
      {"second_order_slope", second_order_slope_check},
      {"second_order_leading", second_order_leading_check},
      {"tensor", tensor_check},
      {"smp", smp_check},
      {"cost_expansion", cost_expansion_check},
  };
  return r;
}

}  // namespace checks

/// Check names run by each pipeline.
inline std::vector<std::string> pipeline_checks(const std::string& pipeline) {
  static const std::map<std::string, std::vector<std::string>> m{
      {"simulate", {"simulate"}},
      {"orders", {"orders"}},
      {"adjoint", {"picard"}},
      {"duality", {"duality_first_order", "dual_family", "second_order_slope", "second_order_leading"}},
      {"tensor", {"tensor"}},
      {"smp-check", {"smp"}},
      {"cost-expansion", {"cost_expansion"}},
  };
  if (pipeline == "all") {
    std::vector<std::string> out;
    for (const auto& [name, fn] : checks::registry()) out.push_back(name);
    return out;
  }
  const auto it = m.find(pipeline);
  if (it == m.end()) throw ConfigError("unknown pipeline '" + pipeline + "'");
  return it->second;
}

struct RunSummary {
  std::vector<ReportRecord> records;
  bool pass = false;
};

/// Validates every instance the pipeline needs, then runs the checks in order and
/// writes <check>.json, summary.json and timings.json into out_dir.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::string& pipeline,
                                 const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  const auto names = pipeline_checks(pipeline);
  std::vector<InstanceConfig> inst;
  for (const auto& n : names) {
    inst.push_back(cfg.instance(n));
    if (n == "tensor")
      for (std::size_t m : inst.back().get<std::vector<std::size_t>>("levels", {8, 16, 32}))
        require_tensor_dim(SegmentGrid(inst.back().n, m, inst.back().d));
  }
  const ReportWriter w(out_dir, cfg.digest);
  RunSummary sum;
  sum.pass = true;
  json timings = json::object();
  json list = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& fn = std::find_if(checks::registry().begin(), checks::registry().end(),
                                  [&](const auto& p) { return p.first == names[i]; })->second;
    const auto t0 = std::chrono::steady_clock::now();
    ReportRecord r = fn(inst[i], w, opt);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.check = names[i];
    r.digest = cfg.digest;
    w.write_json(names[i] + ".json", r.to_json());
    timings[names[i]] = r.wall_seconds;
    list.push_back({{"check", names[i]}, {"pass", r.pass}});
    sum.pass = sum.pass && r.pass;
    sum.records.push_back(std::move(r));
  }
  w.write_json("summary.json", {{"pipeline", pipeline}, {"config_digest", cfg.digest}, {"checks", list}, {"pass", sum.pass}});
  w.write_json("timings.json", {{"config_digest", cfg.digest}, {"wall_seconds", timings}});
  return sum;
}

/// Structured description of an exception for the CLI's error JSON.
inline json error_json(const std::exception& e) {
  json j{{"message", e.what()}};
  if (const auto* p = dynamic_cast<const DivergenceError*>(&e)) {
    j["kind"] = "divergence", j["step"] = p->step();
  } else if (const auto* r = dynamic_cast<const RankError*>(&e)) {
    j["kind"] = "rank", j["step"] = r->step();
  } else if (const auto* v = dynamic_cast<const EvaluationError*>(&e)) {
    j["kind"] = "evaluation", j["t"] = v->time(), j["control"] = v->control();
  } else if (dynamic_cast<const ConfigError*>(&e)) {
    j["kind"] = "config";
  } else if (dynamic_cast<const DimensionError*>(&e)) {
    j["kind"] = "dimension";
  } else if (dynamic_cast<const ArgumentError*>(&e)) {
    j["kind"] = "argument";
  } else if (dynamic_cast<const UnsupportedProblemError*>(&e)) {
    j["kind"] = "unsupported";
  } else {
    j["kind"] = "internal";
  }
  return json{{"error", j}};
}

}  // namespace mfdelay
