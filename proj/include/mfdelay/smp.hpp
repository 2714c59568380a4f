#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mfdelay/adjoint.hpp"
#include "mfdelay/errors.hpp"
#include "mfdelay/forward_sim.hpp"
#include "mfdelay/model.hpp"
#include "mfdelay/parallel.hpp"
#include "mfdelay/stats.hpp"
#include "mfdelay/variation.hpp"

namespace mfdelay {

/// One pass/fail statement: |estimate| <= tolerance.
struct Verdict {
  std::string name;
  double estimate = 0.0;
  double stderr_ = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline Verdict within_sigma(std::string name, const MeanEstimate& e, double k = 3.0, double allowance = 0.0) {
  Verdict v{std::move(name), e.mean, e.stderr_, k * e.stderr_ + allowance, false};
  v.pass = std::abs(v.estimate) <= v.tolerance;
  return v;
}

// ------------------------------------------------------------------------------------
// Hamiltonian

struct HamiltonianContext {
  std::size_t step = 0;
  double t = 0.0;
  LiftedVector X, Xbar;
  Vec u;
  LiftedVector p;
  std::vector<LiftedVector> q;
  std::optional<Mat> P;
};

/// <B, p> + sum_j <Sigma e_j, q_j> - L at control v.
inline double hamiltonian(const LiftedCoefficients& lc, const HamiltonianContext& c, const Vec& v) {
  if (c.q.size() != lc.w()) throw DimensionError("hamiltonian: q must have w columns");
  const LiftedVector B = lc.eval_B(c.t, c.X, c.Xbar, v);
  const Mat S = lc.eval_Sigma(c.t, c.X, c.Xbar, v);
  double h = inner(B, c.p);
  for (std::size_t j = 0; j < lc.w(); ++j)
    h += inner(embed_G(lc.grid(), S.col(static_cast<Eigen::Index>(j))), c.q[j]);
  return h - lc.eval_L(c.t, c.X, c.Xbar, v);
}

/// H(u) - H(v) - Tr(dSigma* P dSigma)/2 with dSigma = Sigma(v) - Sigma(u).
inline double smp_residual(const LiftedCoefficients& lc, const HamiltonianContext& c, const Vec& v) {
  if (!c.P) throw ConfigError("smp_residual: second-order adjoint P missing from context");
  const auto n = static_cast<Eigen::Index>(lc.n());
  const Mat dS = lc.eval_Sigma(c.t, c.X, c.Xbar, v) - lc.eval_Sigma(c.t, c.X, c.Xbar, c.u);
  // Sigma lies in range(G); Lambda is the identity on the head block
  const double tr = (dS.transpose() * c.P->topLeftCorner(n, n) * dS).trace();
  return hamiltonian(lc, c, c.u) - hamiltonian(lc, c, v) - 0.5 * tr;
}

/// Context for particle i at step k, with p = G E_k[p_{k+1}] and P = P_{k+1}.
inline HamiltonianContext make_context(const Ensemble& ens, const AdjointPath& adj, const SecondOrderAdjointPath* P2,
                                       std::size_t i, std::size_t k) {
  if (k >= ens.K) throw ArgumentError("make_context: step out of range");
  HamiltonianContext c;
  const SegmentGrid& g = ens.grid;
  const auto n = static_cast<Eigen::Index>(g.n());
  c.step = k, c.t = ens.time(k);
  c.X = lift_state(ens, i, k), c.Xbar = lift_mean(ens, k);
  c.u = ens.control.values[k];
  Vec ph(n);
  for (Eigen::Index r = 0; r < n; ++r) ph[r] = adj.pred_at(i, k)[r];
  c.p = embed_G(g, ph);
  for (std::size_t j = 0; j < adj.w; ++j) {
    Vec qh(n);
    for (Eigen::Index r = 0; r < n; ++r) qh[r] = adj.q_at(i, k)[j * g.n() + static_cast<std::size_t>(r)];
    c.q.push_back(embed_G(g, qh));
  }
  if (P2) c.P = P2->P.at(k + 1);
  return c;
}

struct SmpCell {
  std::size_t step = 0;
  Vec v;
  MeanEstimate residual;
};

/// Ensemble-averaged residual for every step and every point of the finite U_ad.
inline std::vector<SmpCell> smp_table(const LiftedCoefficients& lc, const Ensemble& ens, const AdjointPath& adj,
                                      const SecondOrderAdjointPath& P2, const ParallelOptions& par = {}) {
  const ControlSet& U = lc.coeffs().admissible();
  if (!U.is_finite()) throw ConfigError("smp_table: U_ad must be a finite set");
  const std::size_t N = ens.N, K = ens.K, n = lc.n(), w = lc.w();
  const auto nn = static_cast<Eigen::Index>(n);
  std::vector<SmpCell> out;
  for (std::size_t k = 0; k < K; ++k) {
    const double t = ens.time(k);
    const Vec& uk = ens.control.values[k];
    const Mat Phh = P2.P.at(k + 1).topLeftCorner(nn, nn);
    for (const Vec& v : U.points) {
      std::vector<double> r(N);
      parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
        Args ab(n), as(n), al(n);
        Vec bu, bv, pt(nn), qj(nn);
        Mat su, sv;
        for (std::size_t i = b; i < e; ++i) {
          const SegmentRef X = ens.window(i, k), Xb = ens.mean_window(k);
          lc.gather(Slot::Drift, X, Xb, ab);
          lc.gather(Slot::Diffusion, X, Xb, as);
          lc.gather(Slot::Running, X, Xb, al);
          lc.drift(ab, t, uk, bu);
          lc.drift(ab, t, v, bv);
          lc.diffusion(as, t, uk, su);
          lc.diffusion(as, t, v, sv);
          for (Eigen::Index c = 0; c < nn; ++c) pt[c] = adj.pred_at(i, k)[c];
          double h = (bu - bv).dot(pt);
          for (std::size_t j = 0; j < w; ++j) {
            for (Eigen::Index c = 0; c < nn; ++c) qj[c] = adj.q_at(i, k)[j * n + static_cast<std::size_t>(c)];
            h += (su.col(static_cast<Eigen::Index>(j)) - sv.col(static_cast<Eigen::Index>(j))).dot(qj);
          }
          h -= lc.running(al, t, uk) - lc.running(al, t, v);
          const Mat dS = sv - su;
          r[i] = h - 0.5 * (dS.transpose() * Phh * dS).trace();
        }
      });
      out.push_back(SmpCell{k, v, mean_estimate(r)});
    }
  }
  return out;
}

// ------------------------------------------------------------------------------------
// duality identities

struct DualityReport {
  MeanEstimate lhs, rhs;
  Verdict verdict;
};

namespace detail {

inline void require_same_ensemble(const VariationBundle& vb, const AdjointPath& adj) {
  if (adj.N != vb.N() || adj.K != vb.K() || !(adj.grid == vb.grid()) || adj.seed != vb.X.noise.seed() ||
      !(adj.control == vb.u))
    throw ConfigError("duality check: adjoint and variation bundle come from different ensembles");
}

/// Per-step E[(l_y, l_y~)] over the bundle's X ensemble.
inline std::vector<std::pair<Vec, Vec>> mean_running_y(const LiftedCoefficients& lc, const VariationBundle& vb,
                                                       const ParallelOptions& par) {
  const std::size_t N = vb.N(), n = lc.n();
  std::vector<std::pair<Vec, Vec>> out;
  for (std::size_t k = 0; k < vb.K(); ++k) {
    std::vector<double> buf(N * 2 * n);
    parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
      Args a(n);
      ScalarJet j(n);
      for (std::size_t i = b; i < e; ++i) {
        lc.gather(Slot::Running, vb.X.window(i, k), vb.X.mean_window(k), a);
        lc.running_jet(a, vb.X.time(k), vb.u.values[k], j);
        for (std::size_t c = 0; c < n; ++c) {
          buf[i * 2 * n + c] = j.y[static_cast<Eigen::Index>(c)];
          buf[i * 2 * n + n + c] = j.yt[static_cast<Eigen::Index>(c)];
        }
      }
    });
    Vec y(static_cast<Eigen::Index>(n)), yt(static_cast<Eigen::Index>(n));
    for (std::size_t c = 0; c < n; ++c) {
      y[static_cast<Eigen::Index>(c)] = column_mean(buf, N, 2 * n, c);
      yt[static_cast<Eigen::Index>(c)] = column_mean(buf, N, 2 * n, n + c);
    }
    out.emplace_back(y, yt);
  }
  return out;
}

inline std::pair<Vec, Vec> mean_terminal_y(const LiftedCoefficients& lc, const Ensemble& X, const ParallelOptions& par) {
  const std::size_t N = X.N, n = lc.n();
  std::vector<double> buf(N * 2 * n);
  parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
    Args a(n);
    ScalarJet j(n);
    for (std::size_t i = b; i < e; ++i) {
      lc.gather(Slot::Terminal, X.window(i, X.K), X.mean_window(X.K), a);
      lc.terminal_jet(a, j);
      for (std::size_t c = 0; c < n; ++c) {
        buf[i * 2 * n + c] = j.y[static_cast<Eigen::Index>(c)];
        buf[i * 2 * n + n + c] = j.yt[static_cast<Eigen::Index>(c)];
      }
    }
  });
  Vec y(static_cast<Eigen::Index>(n)), yt(static_cast<Eigen::Index>(n));
  for (std::size_t c = 0; c < n; ++c) {
    y[static_cast<Eigen::Index>(c)] = column_mean(buf, N, 2 * n, c);
    yt[static_cast<Eigen::Index>(c)] = column_mean(buf, N, 2 * n, n + c);
  }
  return {y, yt};
}

/// a.w_head + at.<W, f> for a history window.
inline double covector_dot(const SegmentGrid& g, const Vec& a, const Vec& at, const DelayKernel& f, SegmentRef W,
                           Vec& scratch) {
  const auto n = static_cast<Eigen::Index>(g.n());
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s += a[i] * W.head[i];
  pair_into(g, W.tail, f, scratch.data());
  return s + at.dot(scratch);
}

inline Vec head_of(const LiftedCoefficients& lc, SegmentRef W) {
  Vec v(static_cast<Eigen::Index>(lc.n()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = W.head[i];
  return v;
}

inline Vec pairing_of(const LiftedCoefficients& lc, SegmentRef W, const DelayKernel& f) {
  Vec v(static_cast<Eigen::Index>(lc.n()));
  pair_into(lc.grid(), W.tail, f, v.data());
  return v;
}

/// Lambda-weighted inner product of a raw vector with a history window.
inline double raw_inner(const SegmentGrid& g, const double* raw, SegmentRef W) {
  const std::size_t n = g.n();
  double h = 0.0, t = 0.0;
  for (std::size_t i = 0; i < n; ++i) h += raw[i] * W.head[i];
  for (std::size_t c = 0; c < n * g.m(); ++c) t += raw[n + c] * W.tail[c];
  return h + g.delta_theta() * t;
}

inline double quad_form(const SegmentGrid& g, const Mat& A, SegmentRef W) {
  const LiftedVector v = to_lifted(g, W);
  return g.weights().cwiseProduct(v.raw()).dot(A * v.raw());
}

}  // namespace detail

struct FirstOrderDuality {
  DualityReport y, z;
};

/// Both first-order identities, estimated particle by particle on the bundle's ensemble.
inline FirstOrderDuality duality_check_first_order(const LiftedCoefficients& lc, const VariationBundle& vb,
                                                   const AdjointPath& adj, const ParallelOptions& par = {}) {
  detail::require_same_ensemble(vb, adj);
  const SegmentGrid& g = lc.grid();
  const std::size_t N = vb.N(), K = vb.K(), n = lc.n(), w = lc.w();
  const auto nn = static_cast<Eigen::Index>(n);
  const KernelSet& ker = lc.kernels();
  const double dt = vb.X.dt;
  const auto ely = detail::mean_running_y(lc, vb, par);
  std::vector<double> ly(N), ry(N), lz(N), rz(N);
  parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
    Args ab(n), as(n), al(n);
    VectorJet Jb(n), Jbe(n);
    std::vector<VectorJet> Js(w, VectorJet(n)), Jse(w, VectorJet(n));
    VectorHessian Hb(n);
    std::vector<VectorHessian> Hs(w, VectorHessian(n));
    ScalarJet lj(n);
    Vec bu, bv, scratch(nn), pt(nn), qj(nn);
    Mat su, sv;
    for (std::size_t i = b; i < e; ++i) {
      ly[i] = detail::raw_inner(g, adj.p_at(i, K), vb.Y.window(i, K));
      lz[i] = detail::raw_inner(g, adj.p_at(i, K), vb.Z.window(i, K));
      double sy = 0.0, sz = 0.0;
      for (std::size_t k = vb.k_begin; k < K; ++k) {
        const double t = vb.X.time(k);
        const Vec& uk = vb.u.values[k];
        const SegmentRef X = vb.X.window(i, k), Xb = vb.X.mean_window(k);
        const SegmentRef Y = vb.Y.window(i, k), Z = vb.Z.window(i, k);
        lc.gather(Slot::Running, X, Xb, al);
        lc.running_jet(al, t, uk, lj);
        double ty = detail::covector_dot(g, lj.x, lj.xt, ker.lx, Y, scratch) +
                    detail::covector_dot(g, ely[k].first, ely[k].second, ker.ly, Y, scratch);
        double tz = detail::covector_dot(g, lj.x, lj.xt, ker.lx, Z, scratch) +
                    detail::covector_dot(g, ely[k].first, ely[k].second, ker.ly, Z, scratch);
        for (Eigen::Index c = 0; c < nn; ++c) pt[c] = adj.pred_at(i, k)[c];
        lc.gather(Slot::Drift, X, Xb, ab);
        lc.gather(Slot::Diffusion, X, Xb, as);
        lc.drift_hessian(ab, t, uk, Hb);
        lc.diffusion_hessian(as, t, uk, Hs);
        const Vec yh = detail::head_of(lc, Y);
        const Vec yb = detail::pairing_of(lc, Y, ker.bx), ys = detail::pairing_of(lc, Y, ker.sx);
        Vec zb = 0.5 * LiftedCoefficients::bilinear(Hb, yh, yb, yh, yb);
        std::vector<Vec> zs(w);
        for (std::size_t j = 0; j < w; ++j) zs[j] = 0.5 * LiftedCoefficients::bilinear(Hs[j], yh, ys, yh, ys);
        if (vb.active(k)) {
          const Vec& ue = vb.ue.values[k];
          lc.drift(ab, t, ue, bv);
          lc.drift(ab, t, uk, bu);
          lc.diffusion(as, t, ue, sv);
          lc.diffusion(as, t, uk, su);
          lc.drift_jet(ab, t, uk, Jb);
          lc.drift_jet(ab, t, ue, Jbe);
          lc.diffusion_jet(as, t, uk, Js);
          lc.diffusion_jet(as, t, ue, Jse);
          ty += (bv - bu).dot(pt);
          zb += (Jbe.x - Jb.x) * yh + (Jbe.xt - Jb.xt) * yb;
          for (std::size_t j = 0; j < w; ++j) {
            for (Eigen::Index c = 0; c < nn; ++c) qj[c] = adj.q_at(i, k)[j * n + static_cast<std::size_t>(c)];
            ty += (sv.col(static_cast<Eigen::Index>(j)) - su.col(static_cast<Eigen::Index>(j))).dot(qj);
            zs[j] += (Jse[j].x - Js[j].x) * yh + (Jse[j].xt - Js[j].xt) * ys;
          }
        }
        tz += zb.dot(pt);
        for (std::size_t j = 0; j < w; ++j) {
          for (Eigen::Index c = 0; c < nn; ++c) qj[c] = adj.q_at(i, k)[j * n + static_cast<std::size_t>(c)];
          tz += zs[j].dot(qj);
        }
        sy += dt * ty;
        sz += dt * tz;
      }
      ry[i] = sy;
      rz[i] = sz;
    }
  });
  auto report = [&](const char* name, const std::vector<double>& l, const std::vector<double>& r) {
    std::vector<double> d(N);
    for (std::size_t i = 0; i < N; ++i) d[i] = l[i] - r[i];
    DualityReport rep;
    rep.lhs = mean_estimate(l);
    rep.rhs = mean_estimate(r);
    rep.verdict = within_sigma(name, mean_estimate(d));
    return rep;
  };
  return FirstOrderDuality{report("duality_Y", ly, ry), report("duality_Z", lz, rz)};
}

struct SecondOrderDuality {
  DualityReport full;  ///< trace term summed over the spike with P_{k+1}
  DualityReport lead;  ///< trace term replaced by eps Tr(dSigma(tau)* P(tau) dSigma(tau))
};

inline SecondOrderDuality duality_check_second_order(const LiftedCoefficients& lc, const VariationBundle& vb,
                                                     const SecondOrderAdjointPath& P2, const AdjointPath* adj = nullptr,
                                                     const ParallelOptions& par = {}) {
  require_deterministic_class(lc, "duality_check_second_order");
  if (P2.P.size() != vb.K() + 1 || !(P2.grid == vb.grid()))
    throw ConfigError("duality_check_second_order: P path does not match the bundle");
  const SegmentGrid& g = lc.grid();
  const std::size_t N = vb.N(), K = vb.K(), n = lc.n();
  const auto nn = static_cast<Eigen::Index>(n);
  const double dt = vb.X.dt;
  std::vector<Mat> H(K);
  for (std::size_t k = 0; k < K; ++k) H[k] = hamiltonian_hessian(lc, vb.X, vb.u, k, adj);
  const double eps = dt * static_cast<double>(vb.k_end - vb.k_begin);
  std::vector<double> lhs(N), rhs(N), lead(N);
  parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
    Args as(n);
    Mat su, sv;
    for (std::size_t i = b; i < e; ++i) {
      lhs[i] = detail::quad_form(g, P2.P[K], vb.Y.window(i, K));
      double quad = 0.0, tr = 0.0, tr_lead = 0.0;
      for (std::size_t k = vb.k_begin; k < K; ++k) {
        quad -= dt * detail::quad_form(g, H[k], vb.Y.window(i, k));
        if (!vb.active(k)) continue;
        lc.gather(Slot::Diffusion, vb.X.window(i, k), vb.X.mean_window(k), as);
        lc.diffusion(as, vb.X.time(k), vb.ue.values[k], sv);
        lc.diffusion(as, vb.X.time(k), vb.u.values[k], su);
        const Mat dS = sv - su;
        tr += dt * (dS.transpose() * P2.P[k + 1].topLeftCorner(nn, nn) * dS).trace();
        if (k == vb.k_begin) tr_lead = eps * (dS.transpose() * P2.P[k].topLeftCorner(nn, nn) * dS).trace();
      }
      rhs[i] = quad + tr;
      lead[i] = quad + tr_lead;
    }
  });
  auto report = [&](const char* name, const std::vector<double>& r) {
    std::vector<double> d(N);
    for (std::size_t i = 0; i < N; ++i) d[i] = lhs[i] - r[i];
    DualityReport rep;
    rep.lhs = mean_estimate(lhs);
    rep.rhs = mean_estimate(r);
    rep.verdict = within_sigma(name, mean_estimate(d));
    return rep;
  };
  return SecondOrderDuality{report("second_order_duality", rhs), report("second_order_leading", lead)};
}

/// E[phi(s) Y(s)] against sum_r dt p^s(r+1)* dB(r), per head coordinate of phi(s) Y(s).
inline std::vector<DualityReport> dual_family_check(const LiftedCoefficients& lc, const VariationBundle& vb,
                                                    const DualFamilyPath& fam, const ParallelOptions& par = {}) {
  require_deterministic_class(lc, "dual_family_check");
  const SegmentGrid& g = lc.grid();
  const std::size_t N = vb.N(), n = lc.n(), s = fam.s;
  if (fam.p.size() != vb.K() + 1) throw ConfigError("dual_family_check: family does not match the bundle");
  const double dt = vb.X.dt;
  std::vector<DualityReport> out;
  for (std::size_t c = 0; c < n; ++c) {
    const Vec ec = embed_G(g, Vec::Unit(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c))).raw();
    const Vec phi_e = fam.p[s] * ec;  // phi(s)* e_c
    std::vector<Vec> heads(s);
    for (std::size_t r = 0; r < s; ++r) heads[r] = (fam.p[r + 1] * ec).head(static_cast<Eigen::Index>(n));
    std::vector<double> lhs(N), rhs(N);
    parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
      Args ab(n);
      Vec bu, bv;
      for (std::size_t i = b; i < e; ++i) {
        lhs[i] = detail::raw_inner(g, phi_e.data(), vb.Y.window(i, s));
        double acc = 0.0;
        for (std::size_t r = vb.k_begin; r < std::min(s, vb.k_end); ++r) {
          lc.gather(Slot::Drift, vb.X.window(i, r), vb.X.mean_window(r), ab);
          lc.drift(ab, vb.X.time(r), vb.ue.values[r], bv);
          lc.drift(ab, vb.X.time(r), vb.u.values[r], bu);
          acc += dt * (bv - bu).dot(heads[r]);
        }
        rhs[i] = acc;
      }
    });
    std::vector<double> d(N);
    for (std::size_t i = 0; i < N; ++i) d[i] = lhs[i] - rhs[i];
    DualityReport rep;
    rep.lhs = mean_estimate(lhs);
    rep.rhs = mean_estimate(rhs);
    rep.verdict = within_sigma("dual_family_s" + std::to_string(s) + "_c" + std::to_string(c), mean_estimate(d));
    out.push_back(rep);
  }
  return out;
}

// ------------------------------------------------------------------------------------
// cost expansion

struct CostExpansionRow {
  double epsilon = 0.0;
  MeanEstimate dJ, rhs, residual;
  bool pass = false;  ///< |residual| <= 3 stderr(dJ)
};

/// Per-particle right-hand side of the second-order cost expansion.
inline std::vector<double> cost_expansion_rhs(const LiftedCoefficients& lc, const VariationBundle& vb,
                                              const ParallelOptions& par = {}) {
  const SegmentGrid& g = lc.grid();
  const std::size_t N = vb.N(), K = vb.K(), n = lc.n();
  const auto nn = static_cast<Eigen::Index>(n);
  const KernelSet& ker = lc.kernels();
  const double dt = vb.X.dt;
  const auto ely = detail::mean_running_y(lc, vb, par);
  const auto emy = detail::mean_terminal_y(lc, vb.X, par);
  std::vector<double> out(N);
  parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
    Args a(n);
    ScalarJet j(n);
    ScalarHessian H(n);
    Vec scratch(nn);
    LiftedVector W(g);
    auto sum_view = [&](std::size_t i, std::size_t k) {
      const SegmentRef Y = vb.Y.window(i, k), Z = vb.Z.window(i, k);
      for (std::size_t c = 0; c < n; ++c) W.raw()[static_cast<Eigen::Index>(c)] = Y.head[c] + Z.head[c];
      for (std::size_t c = 0; c < n * g.m(); ++c) W.raw()[static_cast<Eigen::Index>(n + c)] = Y.tail[c] + Z.tail[c];
      return W.ref();
    };
    for (std::size_t i = b; i < e; ++i) {
      double v = 0.0;
      {
        lc.gather(Slot::Terminal, vb.X.window(i, K), vb.X.mean_window(K), a);
        lc.terminal_jet(a, j);
        lc.terminal_hessian(a, H);
        const SegmentRef YZ = sum_view(i, K);
        v += detail::covector_dot(g, j.x, j.xt, ker.mx, YZ, scratch) +
             detail::covector_dot(g, emy.first, emy.second, ker.my, YZ, scratch);
        const SegmentRef Y = vb.Y.window(i, K);
        const Vec yh = detail::head_of(lc, Y), yp = detail::pairing_of(lc, Y, ker.mx);
        v += 0.5 * LiftedCoefficients::scalar_form(H, yh, yp, yh, yp);
      }
      for (std::size_t k = vb.k_begin; k < K; ++k) {
        const double t = vb.X.time(k);
        lc.gather(Slot::Running, vb.X.window(i, k), vb.X.mean_window(k), a);
        lc.running_jet(a, t, vb.u.values[k], j);
        lc.running_hessian(a, t, vb.u.values[k], H);
        const SegmentRef YZ = sum_view(i, k);
        double r = detail::covector_dot(g, j.x, j.xt, ker.lx, YZ, scratch) +
                   detail::covector_dot(g, ely[k].first, ely[k].second, ker.ly, YZ, scratch);
        const SegmentRef Y = vb.Y.window(i, k);
        const Vec yh = detail::head_of(lc, Y), yp = detail::pairing_of(lc, Y, ker.lx);
        r += 0.5 * LiftedCoefficients::scalar_form(H, yh, yp, yh, yp);
        if (vb.active(k)) r += lc.running(a, t, vb.ue.values[k]) - lc.running(a, t, vb.u.values[k]);
        v += dt * r;
      }
      out[i] = v;
    }
  });
  return out;
}

struct CostExpansionReport {
  std::vector<CostExpansionRow> rows;
  SlopeFit residual_slope;
  bool slope_ok = false;
  bool all_within = false;
};

inline CostExpansionReport cost_expansion_check(const LiftedCoefficients& lc, const InitialSegment& X0,
                                                const ControlPath& u, double tau, const Vec& v,
                                                const std::vector<double>& eps_list, std::size_t N,
                                                std::uint64_t seed, const ParallelOptions& par = {}) {
  CostExpansionReport rep;
  std::vector<std::pair<double, double>> pairs;
  const NoiseBank noise(seed, u.dt, lc.w());
  for (double eps : eps_list) {
    const auto vb = simulate_variations(lc, X0, u, SpikeSpec{tau, eps, v}, N, noise, par);
    const auto c0 = particle_costs(lc, vb.X, vb.u, par);
    const auto c1 = particle_costs(lc, vb.Xe, vb.ue, par);
    const auto rhs = cost_expansion_rhs(lc, vb, par);
    std::vector<double> dJ(N), res(N);
    for (std::size_t i = 0; i < N; ++i) dJ[i] = c1[i] - c0[i], res[i] = dJ[i] - rhs[i];
    CostExpansionRow row{eps, mean_estimate(dJ), mean_estimate(rhs), mean_estimate(res), false};
    row.pass = std::abs(row.residual.mean) <= 3.0 * row.dJ.stderr_;
    rep.rows.push_back(row);
    pairs.emplace_back(eps, std::abs(row.residual.mean));
  }
  rep.all_within = std::all_of(rep.rows.begin(), rep.rows.end(), [](const auto& r) { return r.pass; });
  if (eps_list.size() >= 3) {
    rep.residual_slope = fit_loglog_slope(pairs);
    rep.slope_ok = rep.residual_slope.slope > 1.0;
  }
  return rep;
}

}  // namespace mfdelay
