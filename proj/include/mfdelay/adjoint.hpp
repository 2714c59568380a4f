#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mfdelay/errors.hpp"
#include "mfdelay/forward_sim.hpp"
#include "mfdelay/model.hpp"
#include "mfdelay/parallel.hpp"
#include "mfdelay/regression.hpp"
#include "mfdelay/stats.hpp"

namespace mfdelay {

/// First-order adjoint along an ensemble.
///
/// p is stored in full (raw lifted coordinates) at every step. pred holds the
/// head of E_k[p_{k+1}], which is what multiplies the drift in the Hamiltonian,
/// and q holds the w head columns of the martingale integrand at each step.
struct AdjointPath {
  SegmentGrid grid;
  std::size_t N = 0, K = 0, w = 0;
  std::uint64_t seed = 0;  ///< noise seed of the ensemble it was solved on
  ControlPath control;
  std::vector<double> p;     ///< N x (K+1) x D
  std::vector<double> pred;  ///< N x K x n
  std::vector<double> q;     ///< N x K x (w n), column j at offset j n

  std::size_t D() const noexcept { return grid.dim(); }
  std::size_t n() const noexcept { return grid.n(); }
  const double* p_at(std::size_t i, std::size_t k) const noexcept { return p.data() + (i * (K + 1) + k) * D(); }
  double* p_at(std::size_t i, std::size_t k) noexcept { return p.data() + (i * (K + 1) + k) * D(); }
  const double* pred_at(std::size_t i, std::size_t k) const noexcept { return pred.data() + (i * K + k) * n(); }
  double* pred_at(std::size_t i, std::size_t k) noexcept { return pred.data() + (i * K + k) * n(); }
  const double* q_at(std::size_t i, std::size_t k) const noexcept { return q.data() + (i * K + k) * w * n(); }
  double* q_at(std::size_t i, std::size_t k) noexcept { return q.data() + (i * K + k) * w * n(); }

  LiftedVector p_lifted(std::size_t i, std::size_t k) const {
    Vec raw(static_cast<Eigen::Index>(D()));
    std::copy(p_at(i, k), p_at(i, k) + D(), raw.data());
    return LiftedVector(grid, raw);
  }
  /// Ensemble mean of p_k.
  Vec p_mean(std::size_t k) const {
    Vec out(static_cast<Eigen::Index>(D()));
    for (std::size_t c = 0; c < D(); ++c)
      out[static_cast<Eigen::Index>(c)] = pairwise_sum(p.data() + k * D() + c, N, (K + 1) * D()) / static_cast<double>(N);
    return out;
  }
  Vec pred_mean(std::size_t k) const {
    Vec out(static_cast<Eigen::Index>(n()));
    for (std::size_t c = 0; c < n(); ++c)
      out[static_cast<Eigen::Index>(c)] = pairwise_sum(pred.data() + k * n() + c, N, K * n()) / static_cast<double>(N);
    return out;
  }
  /// Mean of q_k as an n x w matrix.
  Mat q_mean(std::size_t k) const {
    Mat out(static_cast<Eigen::Index>(n()), static_cast<Eigen::Index>(w));
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < n(); ++c)
        out(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) =
            pairwise_sum(q.data() + k * w * n() + j * n() + c, N, K * w * n()) / static_cast<double>(N);
    return out;
  }
};

struct PicardReport {
  std::vector<double> residuals;  ///< residuals[i] = sup |iterate(i+1) - iterate(i)|, i >= 1 counted from the first pass
  std::size_t iterations = 0;
  bool converged = false;
  bool contraction_certificate = false;
  std::vector<std::string> warnings;
};

struct FirstOrderOptions {
  std::size_t picard_iters = 20;
  double tol = 1e-8;
  RegressionBasis::Kind basis = RegressionBasis::Kind::Default;
};

struct FirstOrderResult {
  AdjointPath path;
  PicardReport report;
};

inline const std::vector<double>& picard_residuals(const PicardReport& r) { return r.residuals; }

namespace detail {

/// Adds (a, f_j at) to a raw lifted vector.
inline void add_covector(const SegmentGrid& g, const Vec& a, const Vec& at, const DelayKernel& f, double scale,
                         double* out) {
  const std::size_t n = g.n();
  for (std::size_t i = 0; i < n; ++i) out[i] += scale * a[static_cast<Eigen::Index>(i)];
  for (std::size_t j = 0; j < g.m(); ++j) {
    const double fj = f.values[j];
    if (fj == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) out[n * (1 + j) + i] += scale * fj * at[static_cast<Eigen::Index>(i)];
  }
}

/// One-step shift adjoint on raw coordinates.
inline void shift_adjoint_raw(const SegmentGrid& g, const double* y, double* out) {
  const std::size_t n = g.n(), m = g.m();
  for (std::size_t i = 0; i < n; ++i) out[i] = y[i] + g.delta_theta() * y[n * m + i];
  for (std::size_t i = 0; i < n; ++i) out[n + i] = 0.0;
  for (std::size_t j = 1; j < m; ++j)
    for (std::size_t i = 0; i < n; ++i) out[n * (1 + j) + i] = y[n * j + i];
}

/// Pairwise mean of column c of an N x C row-major buffer.
inline double column_mean(const std::vector<double>& buf, std::size_t N, std::size_t C, std::size_t c) {
  return pairwise_sum(buf.data() + c, N, C) / static_cast<double>(N);
}

}  // namespace detail

/// Backward regression for the McKean-Vlasov adjoint with an outer Picard loop.
///
/// The mean-field driver terms E[B_Y* p~] and E[Sigma_Y* q] are frozen from the
/// previous pass (zero on the first) and refreshed as ensemble averages.
inline FirstOrderResult solve_first_order(const LiftedCoefficients& lc, const Ensemble& ens, const ControlPath& u,
                                          const FirstOrderOptions& opt = {}, const ParallelOptions& par = {}) {
  if (!(u == ens.control)) throw ConfigError("solve_first_order: ensemble was simulated under a different control");
  require_same_grid(lc.grid(), ens.grid, "solve_first_order");
  if (opt.picard_iters == 0) throw ArgumentError("solve_first_order: need at least one Picard pass");
  const SegmentGrid& g = lc.grid();
  const std::size_t N = ens.N, K = ens.K, n = g.n(), w = lc.w(), D = g.dim();
  const double dt = ens.dt;
  const KernelSet& ker = lc.kernels();
  const RegressionBasis basis(opt.basis, lc);
  const std::size_t F = basis.size();

  FirstOrderResult res;
  AdjointPath& A = res.path;
  A.grid = g, A.N = N, A.K = K, A.w = w;
  A.seed = ens.noise.seed(), A.control = u;
  A.p.assign(N * (K + 1) * D, 0.0);
  A.pred.assign(N * K * n, 0.0);
  A.q.assign(N * K * w * n, 0.0);

  // terminal condition: -M_X - E[M_Y], fixed across passes
  {
    std::vector<double> my(N * 2 * n);
    parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
      Args a(n);
      ScalarJet j(n);
      for (std::size_t i = b; i < e; ++i) {
        lc.gather(Slot::Terminal, ens.window(i, K), ens.mean_window(K), a);
        lc.terminal_jet(a, j);
        double* pk = A.p_at(i, K);
        std::fill(pk, pk + D, 0.0);
        detail::add_covector(g, j.x, j.xt, ker.mx, -1.0, pk);
        for (std::size_t c = 0; c < n; ++c) {
          my[i * 2 * n + c] = j.y[static_cast<Eigen::Index>(c)];
          my[i * 2 * n + n + c] = j.yt[static_cast<Eigen::Index>(c)];
        }
      }
    });
    Vec ey(static_cast<Eigen::Index>(n)), eyt(static_cast<Eigen::Index>(n));
    for (std::size_t c = 0; c < n; ++c) {
      ey[static_cast<Eigen::Index>(c)] = detail::column_mean(my, N, 2 * n, c);
      eyt[static_cast<Eigen::Index>(c)] = detail::column_mean(my, N, 2 * n, n + c);
    }
    std::vector<double> emy(D, 0.0);
    detail::add_covector(g, ey, eyt, ker.my, 1.0, emy.data());
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < D; ++c) A.p_at(i, K)[c] -= emy[c];
  }

  // E[L_Y] per step does not depend on the iterate
  std::vector<std::vector<double>> ely(K, std::vector<double>(D, 0.0));
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> ly(N * 2 * n);
    parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
      Args a(n);
      ScalarJet j(n);
      for (std::size_t i = b; i < e; ++i) {
        lc.gather(Slot::Running, ens.window(i, k), ens.mean_window(k), a);
        lc.running_jet(a, ens.time(k), u.values[k], j);
        for (std::size_t c = 0; c < n; ++c) {
          ly[i * 2 * n + c] = j.y[static_cast<Eigen::Index>(c)];
          ly[i * 2 * n + n + c] = j.yt[static_cast<Eigen::Index>(c)];
        }
      }
    });
    Vec ey(static_cast<Eigen::Index>(n)), eyt(static_cast<Eigen::Index>(n));
    for (std::size_t c = 0; c < n; ++c) {
      ey[static_cast<Eigen::Index>(c)] = detail::column_mean(ly, N, 2 * n, c);
      eyt[static_cast<Eigen::Index>(c)] = detail::column_mean(ly, N, 2 * n, n + c);
    }
    detail::add_covector(g, ey, eyt, ker.ly, 1.0, ely[k].data());
  }

  // frozen mean-field terms: E[B_Y* p~] + E[Sigma_Y* q] as raw lifted vectors
  std::vector<std::vector<double>> frozen(K, std::vector<double>(D, 0.0));
  std::vector<double> prev_p, prev_pred, prev_q;

  for (std::size_t it = 0; it < opt.picard_iters; ++it) {
    std::vector<std::vector<double>> next_frozen(K, std::vector<double>(D, 0.0));
    for (std::size_t kk = K; kk-- > 0;) {
      const std::size_t k = kk;
      const double t = ens.time(k);
      Mat design(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(F));
      Mat TA(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D + n));
      parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
        std::vector<double> f(F), sa(D);
        for (std::size_t i = b; i < e; ++i) {
          basis.features(ens.window(i, k), f.data());
          for (std::size_t c = 0; c < F; ++c) design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = f[c];
          const double* pn = A.p_at(i, k + 1);
          detail::shift_adjoint_raw(g, pn, sa.data());
          for (std::size_t c = 0; c < D; ++c) TA(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = sa[c];
          for (std::size_t c = 0; c < n; ++c) TA(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(D + c)) = pn[c];
        }
      });
      const StepRegression reg(design, k);
      const Mat fitA = reg.fit(TA);
      Mat TB(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(w * n));
      parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
        std::vector<double> dw(w);
        for (std::size_t i = b; i < e; ++i) {
          ens.noise.increment(i, k, dw.data());
          const double* pn = A.p_at(i, k + 1);
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t c = 0; c < n; ++c)
              TB(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j * n + c)) =
                  (pn[c] - fitA(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(D + c))) * dw[j] / dt;
        }
      });
      const Mat fitB = reg.fit(TB);

      // driver and next means
      std::vector<double> contrib(N * 4 * n, 0.0);
      parallel_for(N, par, [&](std::size_t b, std::size_t e, unsigned) {
        Args ab(n), as(n), al(n);
        VectorJet Jb(n);
        std::vector<VectorJet> Js(w, VectorJet(n));
        ScalarJet lj(n);
        Vec pt(static_cast<Eigen::Index>(n)), qj(static_cast<Eigen::Index>(n));
        for (std::size_t i = b; i < e; ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          const SegmentRef X = ens.window(i, k), Xb = ens.mean_window(k);
          lc.gather(Slot::Drift, X, Xb, ab);
          lc.gather(Slot::Diffusion, X, Xb, as);
          lc.gather(Slot::Running, X, Xb, al);
          lc.drift_jet(ab, t, u.values[k], Jb);
          lc.diffusion_jet(as, t, u.values[k], Js);
          lc.running_jet(al, t, u.values[k], lj);
          for (std::size_t c = 0; c < n; ++c) pt[static_cast<Eigen::Index>(c)] = fitA(ii, static_cast<Eigen::Index>(D + c));

          double* pk = A.p_at(i, k);
          std::vector<double> drv(D, 0.0);
          detail::add_covector(g, Jb.x.transpose() * pt, Jb.xt.transpose() * pt, ker.bx, 1.0, drv.data());
          detail::add_covector(g, lj.x, lj.xt, ker.lx, -1.0, drv.data());
          Vec cy = Jb.y.transpose() * pt, cyt = Jb.yt.transpose() * pt;
          Vec sy = Vec::Zero(static_cast<Eigen::Index>(n)), syt = Vec::Zero(static_cast<Eigen::Index>(n));
          double* qk = A.q_at(i, k);
          for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t c = 0; c < n; ++c) {
              qj[static_cast<Eigen::Index>(c)] = fitB(ii, static_cast<Eigen::Index>(j * n + c));
              qk[j * n + c] = qj[static_cast<Eigen::Index>(c)];
            }
            detail::add_covector(g, Js[j].x.transpose() * qj, Js[j].xt.transpose() * qj, ker.sx, 1.0, drv.data());
            sy += Js[j].y.transpose() * qj;
            syt += Js[j].yt.transpose() * qj;
          }
          for (std::size_t c = 0; c < D; ++c)
            pk[c] = fitA(ii, static_cast<Eigen::Index>(c)) + dt * (drv[c] + frozen[k][c] - ely[k][c]);
          for (std::size_t c = 0; c < n; ++c) {
            A.pred_at(i, k)[c] = pt[static_cast<Eigen::Index>(c)];
            const auto cc = static_cast<Eigen::Index>(c);
            contrib[i * 4 * n + c] = cy[cc];
            contrib[i * 4 * n + n + c] = cyt[cc];
            contrib[i * 4 * n + 2 * n + c] = sy[cc];
            contrib[i * 4 * n + 3 * n + c] = syt[cc];
          }
        }
      });
      Vec m0(static_cast<Eigen::Index>(n)), m1(static_cast<Eigen::Index>(n)), m2(static_cast<Eigen::Index>(n)),
          m3(static_cast<Eigen::Index>(n));
      for (std::size_t c = 0; c < n; ++c) {
        const auto cc = static_cast<Eigen::Index>(c);
        m0[cc] = detail::column_mean(contrib, N, 4 * n, c);
        m1[cc] = detail::column_mean(contrib, N, 4 * n, n + c);
        m2[cc] = detail::column_mean(contrib, N, 4 * n, 2 * n + c);
        m3[cc] = detail::column_mean(contrib, N, 4 * n, 3 * n + c);
      }
      detail::add_covector(g, m0, m1, ker.by, 1.0, next_frozen[k].data());
      detail::add_covector(g, m2, m3, ker.sy, 1.0, next_frozen[k].data());
    }
    res.report.iterations = it + 1;
    if (it > 0) {
      double r = 0.0;
      for (std::size_t c = 0; c < A.p.size(); ++c) r = std::max(r, std::abs(A.p[c] - prev_p[c]));
      for (std::size_t c = 0; c < A.pred.size(); ++c) r = std::max(r, std::abs(A.pred[c] - prev_pred[c]));
      for (std::size_t c = 0; c < A.q.size(); ++c) r = std::max(r, std::abs(A.q[c] - prev_q[c]));
      res.report.residuals.push_back(r);
      if (r < opt.tol) {
        res.report.converged = true;
        break;
      }
    }
    prev_p = A.p, prev_pred = A.pred, prev_q = A.q;
    frozen = std::move(next_frozen);
  }

  const auto& r = res.report.residuals;
  bool monotone = true;
  for (std::size_t i = 1; i < r.size(); ++i) monotone = monotone && r[i] <= r[i - 1];
  res.report.contraction_certificate = res.report.converged && monotone;
  if (!res.report.converged) res.report.warnings.push_back("Picard loop did not reach tolerance");
  if (!res.report.contraction_certificate) res.report.warnings.push_back("no contraction certificate");
  return res;
}

// ------------------------------------------------------------------------------------
// deterministic-derivative class

/// Linearized operators at step k, evaluated at the ensemble mean.
struct StepOperators {
  Mat BX, BY;
  std::vector<Mat> SX, SY;
};

inline StepOperators step_operators(const LiftedCoefficients& lc, const Ensemble& ens, const ControlPath& u,
                                    std::size_t k) {
  const LiftedVector Xb = lift_mean(ens, k);
  const double t = ens.time(k);
  StepOperators op;
  const VectorJet Jb = lc.jet_B(t, Xb, Xb, u.values[k]);
  op.BX = lc.matrix_of_head_operator(Jb.x, Jb.xt, lc.kernels().bx);
  op.BY = lc.matrix_of_head_operator(Jb.y, Jb.yt, lc.kernels().by);
  const auto Js = lc.jet_Sigma(t, Xb, Xb, u.values[k]);
  for (const auto& J : Js) {
    op.SX.push_back(lc.matrix_of_head_operator(J.x, J.xt, lc.kernels().sx));
    op.SY.push_back(lc.matrix_of_head_operator(J.y, J.yt, lc.kernels().sy));
  }
  return op;
}

/// H_XX at step k: -L_XX + <p~, B_XX> + <q, Sigma_XX> with the adjoint means.
inline Mat hamiltonian_hessian(const LiftedCoefficients& lc, const Ensemble& ens, const ControlPath& u, std::size_t k,
                               const AdjointPath* adj) {
  const LiftedVector Xb = lift_mean(ens, k);
  const double t = ens.time(k);
  const std::size_t n = lc.n(), w = lc.w();
  Mat H = -lc.matrix_of_L_XX(t, Xb, Xb, u.values[k]);
  VectorHessian Hb(n);
  lc.drift_hessian(lc.args(Slot::Drift, Xb, Xb), t, u.values[k], Hb);
  std::vector<VectorHessian> Hs(w, VectorHessian(n));
  lc.diffusion_hessian(lc.args(Slot::Diffusion, Xb, Xb), t, u.values[k], Hs);
  auto nonzero = [](const VectorHessian& h) {
    for (std::size_t i = 0; i < h.xx.size(); ++i)
      if (h.xx[i].squaredNorm() + h.xtxt[i].squaredNorm() + h.xxt[i].squaredNorm() > 0.0) return true;
    return false;
  };
  bool any = nonzero(Hb);
  for (const auto& h : Hs) any = any || nonzero(h);
  if (!any) return H;
  if (adj == nullptr) throw ArgumentError("hamiltonian_hessian: adjoint path needed for nonzero b/sigma Hessians");
  const Vec pm = adj->pred_mean(k);
  const Mat qm = adj->q_mean(k);
  for (std::size_t i = 0; i < n; ++i) {
    ScalarHessian s(n);
    s.xx = Hb.xx[i], s.xtxt = Hb.xtxt[i], s.xxt = Hb.xxt[i];
    H += pm[static_cast<Eigen::Index>(i)] * lc.matrix_of_form(s, lc.kernels().bx);
    for (std::size_t j = 0; j < w; ++j) {
      s.xx = Hs[j].xx[i], s.xtxt = Hs[j].xtxt[i], s.xxt = Hs[j].xxt[i];
      H += qm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * lc.matrix_of_form(s, lc.kernels().sx);
    }
  }
  return H;
}

struct SecondOrderAdjointPath {
  SegmentGrid grid;
  std::vector<Mat> P;  ///< K+1 matrices in raw coordinates
  bool q_zero = true;
  double max_symmetry_defect = 0.0;  ///< relative HS defect before symmetrization
};

inline void require_deterministic_class(const LiftedCoefficients& lc, const char* where) {
  if (!lc.coeffs().deterministic_derivatives())
    throw UnsupportedProblemError(std::string(where) + ": requires the deterministic-derivative problem class");
}

/// P_k = M_k* P_{k+1} M_k + dt sum_j Sx_j* P_{k+1} Sx_j + dt H_XX with M_k = S + dt B_X.
inline SecondOrderAdjointPath solve_second_order(const LiftedCoefficients& lc, const Ensemble& ens, const ControlPath& u,
                                                 const AdjointPath* adj = nullptr) {
  require_deterministic_class(lc, "solve_second_order");
  if (!(u == ens.control)) throw ConfigError("solve_second_order: ensemble was simulated under a different control");
  const SegmentGrid& g = lc.grid();
  const std::size_t K = ens.K;
  const double dt = ens.dt;
  SecondOrderAdjointPath out;
  out.grid = g;
  out.P.resize(K + 1);
  const LiftedVector XK = lift_mean(ens, K);
  out.P[K] = -lc.matrix_of_M_XX(XK, XK);
  for (std::size_t kk = K; kk-- > 0;) {
    const StepOperators op = step_operators(lc, ens, u, kk);
    const Mat& Pn = out.P[kk + 1];
    const Mat M = shift_matrix(g, 1) + dt * op.BX;
    Mat P = lambda_adjoint(g, M) * Pn * M + dt * hamiltonian_hessian(lc, ens, u, kk, adj);
    for (const auto& Sx : op.SX) P += dt * lambda_adjoint(g, Sx) * Pn * Sx;
    const double scale = std::max(1.0, hs_norm(g, P));
    out.max_symmetry_defect = std::max(out.max_symmetry_defect, symmetry_defect(g, P) / scale);
    out.P[kk] = symmetrize(g, P);
  }
  return out;
}

struct DualFamilyPath {
  std::size_t s = 0;
  std::vector<Mat> p;  ///< K+1 entries; zero for r > s
};

/// p^s(r) = (S + dt (B_X + B_Y))_r* p^s(r+1), p^s(s) = phi*.
inline DualFamilyPath solve_dual_family(const LiftedCoefficients& lc, const Ensemble& ens, const ControlPath& u,
                                        std::size_t s, const Mat& phi_star) {
  require_deterministic_class(lc, "solve_dual_family");
  const SegmentGrid& g = lc.grid();
  const auto D = static_cast<Eigen::Index>(g.dim());
  if (s > ens.K) throw ArgumentError("solve_dual_family: s beyond the horizon");
  if (phi_star.rows() != D || phi_star.cols() != D) throw DimensionError("solve_dual_family: phi* shape");
  if (!phi_star.allFinite()) throw ArgumentError("solve_dual_family: phi* not finite");
  DualFamilyPath out;
  out.s = s;
  out.p.assign(ens.K + 1, Mat::Zero(D, D));
  out.p[s] = phi_star;
  for (std::size_t r = s; r-- > 0;) {
    const StepOperators op = step_operators(lc, ens, u, r);
    const Mat M = shift_matrix(g, 1) + ens.dt * (op.BX + op.BY);
    out.p[r] = lambda_adjoint(g, M) * out.p[r + 1];
  }
  return out;
}

}  // namespace mfdelay
