#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "mfdelay/forward_sim.hpp"
#include "mfdelay/stats.hpp"

namespace mfdelay {

/// u^eps = v on [tau, tau + eps), u elsewhere.
struct SpikeSpec {
  double tau = 0.0;
  double epsilon = 0.0;
  Vec v;
};

/// Converts a time to a step index, requiring it to lie on the grid.
inline std::size_t grid_index(double t, double dt, const char* what) {
  const double r = t / dt;
  const double k = std::round(r);
  if (std::abs(r - k) > 1e-9 * std::max(1.0, std::abs(r)) || k < 0)
    throw ConfigError(std::string(what) + " is not a multiple of the time step");
  return static_cast<std::size_t>(k);
}

/// First step and one-past-last step of the spike.
inline std::pair<std::size_t, std::size_t> spike_steps(const SpikeSpec& s, const ControlPath& u) {
  const std::size_t kb = grid_index(s.tau, u.dt, "spike tau");
  const std::size_t ke = kb + grid_index(s.epsilon, u.dt, "spike epsilon");
  if (ke == kb) throw ConfigError("spike epsilon must be positive");
  if (ke > u.K()) throw ConfigError("spike extends beyond T");
  return {kb, ke};
}

inline ControlPath apply_spike(const ControlPath& u, const SpikeSpec& s) {
  const auto [kb, ke] = spike_steps(s, u);
  ControlPath out = u;
  for (std::size_t k = kb; k < ke; ++k) out.values[k] = s.v;
  return out;
}

/// X, X^eps, Y^eps, Z^eps on shared noise. Y and Z use Ensemble storage with a zero
/// initial segment; their tails are histories of heads.
struct VariationBundle {
  Ensemble X, Xe, Y, Z;
  ControlPath u, ue;
  SpikeSpec spike;
  std::size_t k_begin = 0, k_end = 0;

  const SegmentGrid& grid() const noexcept { return X.grid; }
  std::size_t N() const noexcept { return X.N; }
  std::size_t K() const noexcept { return X.K; }
  bool active(std::size_t k) const noexcept { return k >= k_begin && k < k_end; }
};

namespace detail {

inline Ensemble empty_like(const Ensemble& e) {
  Ensemble z;
  z.grid = e.grid, z.N = e.N, z.K = e.K, z.dt = e.dt, z.noise = e.noise, z.control = e.control;
  z.hist.assign(e.hist.size(), 0.0);
  z.mean.assign(e.mean.size(), 0.0);
  return z;
}

/// Buffers for the linearized steps along X.
struct VariationWorkspace {
  StateWorkspace st;
  Args ab, as;
  VectorJet Jb, Jbe;
  std::vector<VectorJet> Js, Jse;
  VectorHessian Hb;
  std::vector<VectorHessian> Hs;
  Vec be;
  Mat se;
  Vec yb, ys, ybar_b, ybar_s, zb, zs, zbar_b, zbar_s, ybar, zbar, yh, zh;
  VariationWorkspace(std::size_t n, std::size_t w)
      : st(n, w), ab(n), as(n), Jb(n), Jbe(n), Js(w, VectorJet(n)), Jse(w, VectorJet(n)), Hb(n), Hs(w, VectorHessian(n)) {
    const auto k = static_cast<Eigen::Index>(n);
    be.setZero(k), se.setZero(k, static_cast<Eigen::Index>(w));
    for (Vec* v : {&yb, &ys, &ybar_b, &ybar_s, &zb, &zs, &zbar_b, &zbar_s, &ybar, &zbar, &yh, &zh}) v->setZero(k);
  }
};

inline void copy_head(const double* src, Vec& dst) {
  for (Eigen::Index i = 0; i < dst.size(); ++i) dst[i] = src[i];
}

}  // namespace detail

/// Coupled Euler steps for X, X^eps and the first/second variational equations.
/// Derivatives are taken along X with control u; delta-terms are active on the spike only.
inline VariationBundle simulate_variations(const LiftedCoefficients& lc, const InitialSegment& X0, const ControlPath& u,
                                           const SpikeSpec& s, std::size_t N, const NoiseBank& noise,
                                           const ParallelOptions& par = {}) {
  validate_control(lc, u);
  if (!lc.coeffs().admissible().contains(s.v)) throw ConfigError("spike value outside U_ad");
  VariationBundle vb;
  vb.u = u;
  vb.ue = apply_spike(u, s);
  vb.spike = s;
  std::tie(vb.k_begin, vb.k_end) = spike_steps(s, u);
  if (N == 0) throw ArgumentError("simulate_variations: N must be positive");
  if (noise.w() != lc.w()) throw DimensionError("simulate_variations: noise dimension differs from model w");

  // initial states
  auto init = [&](const ControlPath& c) {
    Ensemble e;
    e.grid = lc.grid(), e.N = N, e.K = c.K(), e.dt = c.dt, e.noise = noise, e.control = c;
    e.hist.assign(N * e.L() * e.n(), 0.0);
    e.mean.assign(e.L() * e.n(), 0.0);
    detail::fill_initial(e.grid, X0, N, e.L(), e.hist);
    for (std::size_t h = 0; h <= e.grid.m(); ++h) detail::average_node(e.grid, N, e.L(), e.hist, e.mean, h);
    return e;
  };
  vb.X = init(u);
  vb.Xe = init(vb.ue);
  vb.Y = detail::empty_like(vb.X);
  vb.Z = detail::empty_like(vb.X);

  const SegmentGrid& g = lc.grid();
  const std::size_t n = g.n(), m = g.m(), w = lc.w(), L = vb.X.L();
  const double dt = u.dt;
  const KernelSet& ker = lc.kernels();

  for (std::size_t k = 0; k < u.K(); ++k) {
    const double t = vb.X.time(k);
    const bool spike = vb.active(k);
    const bool linearized = k >= vb.k_begin;  // Y = Z = 0 exactly before the spike
    const SegmentRef Xbar = vb.X.mean_window(k), Xebar = vb.Xe.mean_window(k);
    const SegmentRef Ybar = vb.Y.mean_window(k), Zbar = vb.Z.mean_window(k);

    parallel_for(N, par, [&](std::size_t b, std::size_t end, unsigned) {
      detail::VariationWorkspace ws(n, w);
      if (linearized) {
        detail::copy_head(Ybar.head, ws.ybar);
        detail::copy_head(Zbar.head, ws.zbar);
        pair_into(g, Ybar.tail, ker.by, ws.ybar_b.data());
        pair_into(g, Ybar.tail, ker.sy, ws.ybar_s.data());
        pair_into(g, Zbar.tail, ker.by, ws.zbar_b.data());
        pair_into(g, Zbar.tail, ker.sy, ws.zbar_s.data());
      }
      for (std::size_t p = b; p < end; ++p) {
        noise.increment(p, k, ws.st.dw.data());
        const SegmentRef Xp = vb.X.window(p, k);
        double* xo = vb.X.history(p) + (k + m + 1) * n;
        double* xeo = vb.Xe.history(p) + (k + m + 1) * n;
        detail::euler_state(lc, ws.st, Xp, Xbar, t, u.values[k], dt, xo);
        detail::euler_state(lc, ws.st, vb.Xe.window(p, k), Xebar, t, vb.ue.values[k], dt, xeo);
        for (std::size_t i = 0; i < n; ++i)
          if (!std::isfinite(xo[i]) || !std::isfinite(xeo[i])) throw DivergenceError("non-finite state", k + 1);
        if (!linearized) continue;

        const SegmentRef Yp = vb.Y.window(p, k), Zp = vb.Z.window(p, k);
        lc.gather(Slot::Drift, Xp, Xbar, ws.ab);
        lc.gather(Slot::Diffusion, Xp, Xbar, ws.as);
        lc.drift_jet(ws.ab, t, u.values[k], ws.Jb);
        lc.diffusion_jet(ws.as, t, u.values[k], ws.Js);
        lc.drift_hessian(ws.ab, t, u.values[k], ws.Hb);
        lc.diffusion_hessian(ws.as, t, u.values[k], ws.Hs);

        detail::copy_head(Yp.head, ws.yh);
        detail::copy_head(Zp.head, ws.zh);
        pair_into(g, Yp.tail, ker.bx, ws.yb.data());
        pair_into(g, Yp.tail, ker.sx, ws.ys.data());
        pair_into(g, Zp.tail, ker.bx, ws.zb.data());
        pair_into(g, Zp.tail, ker.sx, ws.zs.data());

        Vec dy = (ws.Jb.x * ws.yh + ws.Jb.xt * ws.yb + ws.Jb.y * ws.ybar + ws.Jb.yt * ws.ybar_b) * dt;
        Vec dz = (ws.Jb.x * ws.zh + ws.Jb.xt * ws.zb + ws.Jb.y * ws.zbar + ws.Jb.yt * ws.zbar_b +
                  0.5 * LiftedCoefficients::bilinear(ws.Hb, ws.yh, ws.yb, ws.yh, ws.yb)) *
                 dt;
        for (std::size_t j = 0; j < w; ++j) {
          const VectorJet& J = ws.Js[j];
          const double dw = ws.st.dw[j];
          dy += (J.x * ws.yh + J.xt * ws.ys + J.y * ws.ybar + J.yt * ws.ybar_s) * dw;
          dz += (J.x * ws.zh + J.xt * ws.zs + J.y * ws.zbar + J.yt * ws.zbar_s +
                 0.5 * LiftedCoefficients::bilinear(ws.Hs[j], ws.yh, ws.ys, ws.yh, ws.ys)) *
                dw;
        }
        if (spike) {
          const Vec& ue = vb.ue.values[k];
          lc.drift(ws.ab, t, ue, ws.be);
          lc.drift(ws.ab, t, u.values[k], ws.st.b);
          lc.diffusion(ws.as, t, ue, ws.se);
          lc.diffusion(ws.as, t, u.values[k], ws.st.s);
          lc.drift_jet(ws.ab, t, ue, ws.Jbe);
          lc.diffusion_jet(ws.as, t, ue, ws.Jse);
          dy += (ws.be - ws.st.b) * dt;
          dz += ((ws.Jbe.x - ws.Jb.x) * ws.yh + (ws.Jbe.xt - ws.Jb.xt) * ws.yb) * dt;
          for (std::size_t j = 0; j < w; ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            const double dw = ws.st.dw[j];
            dy += (ws.se.col(jj) - ws.st.s.col(jj)) * dw;
            dz += ((ws.Jse[j].x - ws.Js[j].x) * ws.yh + (ws.Jse[j].xt - ws.Js[j].xt) * ws.ys) * dw;
          }
        }
        double* yo = vb.Y.history(p) + (k + m + 1) * n;
        double* zo = vb.Z.history(p) + (k + m + 1) * n;
        for (std::size_t i = 0; i < n; ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          yo[i] = ws.yh[ii] + dy[ii];
          zo[i] = ws.zh[ii] + dz[ii];
          if (!std::isfinite(yo[i]) || !std::isfinite(zo[i])) throw DivergenceError("non-finite variation", k + 1);
        }
      }
    });
    for (Ensemble* e : {&vb.X, &vb.Xe, &vb.Y, &vb.Z}) detail::average_node(g, N, L, e->hist, e->mean, k + m + 1);
  }
  return vb;
}

// ------------------------------------------------------------------------------------
// order probes

enum class ProbeQuantity { StateGap, Y, Z, MeanY, R1, R2 };

inline const char* probe_name(ProbeQuantity q) {
  switch (q) {
    case ProbeQuantity::StateGap: return "E_sup_Xeps_minus_X";
    case ProbeQuantity::Y: return "E_sup_Y";
    case ProbeQuantity::Z: return "E_sup_Z";
    case ProbeQuantity::MeanY: return "sup_norm_E_Y";
    case ProbeQuantity::R1: return "E_sup_R1";
    default: return "E_sup_R2";
  }
}

inline std::vector<ProbeQuantity> all_probe_quantities() {
  return {ProbeQuantity::StateGap, ProbeQuantity::Y, ProbeQuantity::Z,
          ProbeQuantity::MeanY, ProbeQuantity::R1, ProbeQuantity::R2};
}

/// Per-particle sup_k ||W_k||^{2j} where W is a signed combination of bundle histories.
inline std::vector<double> sup_norm_powers(const VariationBundle& vb, ProbeQuantity q, int j,
                                           const ParallelOptions& par = {}) {
  const SegmentGrid& g = vb.grid();
  const std::size_t n = g.n(), m = g.m(), L = vb.X.L(), K = vb.K();
  std::vector<double> out(vb.N(), 0.0);
  parallel_for(vb.N(), par, [&](std::size_t b, std::size_t e, unsigned) {
    std::vector<double> sq(L);
    for (std::size_t p = b; p < e; ++p) {
      const double *x = vb.X.history(p), *xe = vb.Xe.history(p), *y = vb.Y.history(p), *z = vb.Z.history(p);
      for (std::size_t h = 0; h < L; ++h) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t c = h * n + i;
          double v = 0.0;
          switch (q) {
            case ProbeQuantity::StateGap: v = xe[c] - x[c]; break;
            case ProbeQuantity::Y: v = y[c]; break;
            case ProbeQuantity::Z: v = z[c]; break;
            case ProbeQuantity::R1: v = xe[c] - x[c] - y[c]; break;
            case ProbeQuantity::R2: v = xe[c] - x[c] - y[c] - z[c]; break;
            default: break;
          }
          s += v * v;
        }
        sq[h] = s;
      }
      double best = 0.0;
      for (std::size_t k = 0; k <= K; ++k) {
        double tail = 0.0;
        for (std::size_t jj = 0; jj < m; ++jj) tail += sq[k + jj];
        best = std::max(best, sq[k + m] + g.delta_theta() * tail);
      }
      out[p] = std::pow(best, j);
    }
  });
  return out;
}

/// sup_k ||E_N[Y_k]||^j.
inline double sup_mean_norm(const VariationBundle& vb, int j) {
  double best = 0.0;
  for (std::size_t k = 0; k <= vb.K(); ++k) best = std::max(best, norm_squared(vb.grid(), vb.Y.mean_window(k)));
  return std::pow(std::sqrt(best), j);
}

struct ProbeRow {
  std::string quantity;
  double epsilon = 0.0;
  double value = 0.0;
  double stderr_ = 0.0;
};

struct ProbeSummary {
  std::string quantity;
  double expected = 0.0;
  double slope = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  double lower = 0.0, upper = 0.0;  ///< acceptance band
  bool degenerate = false;
  bool pass = false;
  std::vector<std::string> warnings;
};

struct OrderProbeReport {
  std::vector<ProbeRow> rows;
  std::vector<ProbeSummary> summaries;

  const ProbeSummary& summary(ProbeQuantity q) const {
    for (const auto& s : summaries)
      if (s.quantity == probe_name(q)) return s;
    throw ArgumentError("order probe: quantity missing");
  }
};

/// Acceptance band for quantity q at order j: j-order quantities +-0.2, 2j-order +-0.3, R2 above 2j+0.1.
inline std::pair<double, double> probe_band(ProbeQuantity q, int j) {
  const double jj = j;
  switch (q) {
    case ProbeQuantity::Z:
    case ProbeQuantity::R1: return {2 * jj - 0.3, 2 * jj + 0.3};
    case ProbeQuantity::R2: return {2 * jj + 0.1, std::numeric_limits<double>::infinity()};
    default: return {jj - 0.2, jj + 0.2};
  }
}

inline double probe_expected(ProbeQuantity q, int j) {
  switch (q) {
    case ProbeQuantity::Z:
    case ProbeQuantity::R1:
    case ProbeQuantity::R2: return 2.0 * j;
    default: return j;
  }
}

/// Slopes of the section-3 asymptotic quantities against eps on shared noise.
/// Particle values are pooled across seeds; the mean-path quantity is averaged over seeds.
inline OrderProbeReport order_probe(const LiftedCoefficients& lc, const InitialSegment& X0, const ControlPath& u,
                                    double tau, const Vec& v, const std::vector<double>& eps_list, int j,
                                    std::size_t N, const std::vector<std::uint64_t>& seeds,
                                    const ParallelOptions& par = {}) {
  if (eps_list.size() < 4) throw ConfigError("order_probe: need at least 4 epsilon values");
  if (seeds.empty()) throw ConfigError("order_probe: need at least one seed");
  OrderProbeReport rep;
  std::map<ProbeQuantity, std::vector<std::pair<double, double>>> pairs;
  for (double eps : eps_list) {
    std::map<ProbeQuantity, std::vector<double>> pooled;
    std::vector<double> mean_vals;
    for (std::uint64_t seed : seeds) {
      const NoiseBank noise(seed, u.dt, lc.w());
      const auto vb = simulate_variations(lc, X0, u, SpikeSpec{tau, eps, v}, N, noise, par);
      for (ProbeQuantity q : all_probe_quantities()) {
        if (q == ProbeQuantity::MeanY) continue;
        const auto vals = sup_norm_powers(vb, q, j, par);
        auto& dst = pooled[q];
        dst.insert(dst.end(), vals.begin(), vals.end());
      }
      mean_vals.push_back(sup_mean_norm(vb, j));
    }
    for (ProbeQuantity q : all_probe_quantities()) {
      const MeanEstimate est = q == ProbeQuantity::MeanY ? mean_estimate(mean_vals) : mean_estimate(pooled[q]);
      rep.rows.push_back(ProbeRow{probe_name(q), eps, est.mean, est.stderr_});
      pairs[q].emplace_back(eps, est.mean);
    }
  }
  for (ProbeQuantity q : all_probe_quantities()) {
    ProbeSummary s;
    s.quantity = probe_name(q);
    s.expected = probe_expected(q, j);
    std::tie(s.lower, s.upper) = probe_band(q, j);
    bool all_zero = true;
    for (const auto& pr : pairs[q]) all_zero = all_zero && pr.second == 0.0;
    if (all_zero) {
      s.degenerate = true;
      s.warnings.push_back("degenerate: exact zero");
    } else {
      try {
        const SlopeFit f = fit_loglog_slope(pairs[q]);
        s.slope = f.slope, s.ci_low = f.ci_low, s.ci_high = f.ci_high, s.warnings = f.warnings;
        s.pass = s.slope >= s.lower && s.slope <= s.upper;
      } catch (const ArgumentError& e) {
        s.warnings.push_back(e.what());
      }
    }
    rep.summaries.push_back(s);
  }
  return rep;
}

}  // namespace mfdelay
