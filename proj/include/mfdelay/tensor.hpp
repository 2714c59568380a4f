#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mfdelay/errors.hpp"
#include "mfdelay/model.hpp"
#include "mfdelay/parallel.hpp"
#include "mfdelay/segment_space.hpp"
#include "mfdelay/variation.hpp"

namespace mfdelay {

/// Largest lifted dimension accepted for dense tensor work.
inline constexpr std::size_t kMaxTensorDim = 64;

inline void require_tensor_dim(const SegmentGrid& g) {
  if (g.dim() > kMaxTensorDim) throw ConfigError("tensor: lifted dimension n(1+m) exceeds 64");
}

/// Matrix of T_{f (x) g}: h -> <f, h> g, i.e. g (Lambda f)^T.
inline Mat tensor_matrix(const LiftedVector& f, const LiftedVector& g) {
  require_same_grid(f.grid(), g.grid(), "tensor_matrix");
  return g.raw() * f.grid().weights().cwiseProduct(f.raw()).transpose();
}

/// sum_i C_i M C_i* with Lambda-adjoints.
inline Mat trace_conjugation(const SegmentGrid& g, const std::vector<Mat>& C, const Mat& M) {
  const auto D = static_cast<Eigen::Index>(g.dim());
  if (M.rows() != D || M.cols() != D) throw DimensionError("trace_conjugation: matrix shape");
  Mat out = Mat::Zero(D, D);
  for (const auto& c : C) {
    if (c.rows() != D || c.cols() != D) throw DimensionError("trace_conjugation: operator shape");
    out += c * M * lambda_adjoint(g, c);
  }
  return out;
}

/// Per-particle T_{Y (x) Y} along the bundle, one matrix per step.
inline std::vector<Mat> outer_product_path(const VariationBundle& vb, std::size_t particle) {
  if (particle >= vb.N()) throw ArgumentError("outer_product_path: particle out of range");
  std::vector<Mat> out;
  out.reserve(vb.K() + 1);
  for (std::size_t k = 0; k <= vb.K(); ++k) {
    const LiftedVector y = to_lifted(vb.grid(), vb.Y.window(particle, k));
    out.push_back(tensor_matrix(y, y));
  }
  return out;
}

/// Forcing of the tensor equation at one step for one particle.
///
/// Every vector other than Y itself lies in range(G), so Phi and Psi are
/// stored as head data: Phi = T_{Y (x) Ga} + T_{Ga (x) Y} + G C G^T and
/// Psi_j = T_{Y (x) G e_j} + T_{G e_j (x) Y}.
struct TensorForcing {
  Vec a;       ///< B_Y E[Y] + delta b
  Mat C;       ///< n x n head block: sum_i c_i c_i^T - s_i s_i^T
  Mat e;       ///< n x w: (Sigma_Y E[Y] + delta sigma) xi_j
  Mat top_bx;  ///< n x D head rows of B_X
  std::vector<Mat> top_sx;  ///< n x D head rows of Sigma_X^j

  Mat phi(const SegmentGrid& g, const Vec& Y) const {
    const auto n = static_cast<Eigen::Index>(g.n());
    const Vec lamY = g.weights().cwiseProduct(Y);
    Mat out = Mat::Zero(Y.size(), Y.size());
    out.topRows(n) += a * lamY.transpose();
    out.leftCols(n) += Y * a.transpose();
    out.topLeftCorner(n, n) += C;
    return out;
  }
  Mat psi(const SegmentGrid& g, const Vec& Y, std::size_t j) const {
    const auto n = static_cast<Eigen::Index>(g.n());
    const Vec lamY = g.weights().cwiseProduct(Y);
    const Vec ej = e.col(static_cast<Eigen::Index>(j));
    Mat out = Mat::Zero(Y.size(), Y.size());
    out.topRows(n) += ej * lamY.transpose();
    out.leftCols(n) += Y * ej.transpose();
    return out;
  }
};

namespace detail {

struct TensorWorkspace {
  Args ab, as;
  VectorJet Jb;
  std::vector<VectorJet> Js;
  Vec b, be;
  Mat s, se;
  std::vector<double> dw;
  TensorWorkspace(std::size_t n, std::size_t w)
      : ab(n), as(n), Jb(n), Js(w, VectorJet(n)), dw(w) {}
};

inline Mat head_rows(const LiftedCoefficients& lc, const Mat& A, const Mat& At, const DelayKernel& f) {
  Mat top(A.rows(), 2 * A.cols());
  top << A, At;
  return top * lc.pairing_map(f);
}

}  // namespace detail

/// Assembles the forcing of particle p at step k from the bundle.
inline TensorForcing tensor_forcing(const LiftedCoefficients& lc, const VariationBundle& vb, std::size_t p,
                                    std::size_t k, detail::TensorWorkspace& ws) {
  const SegmentGrid& g = lc.grid();
  const std::size_t n = g.n(), w = lc.w();
  const auto nn = static_cast<Eigen::Index>(n);
  const double t = vb.X.time(k);
  const Vec& uk = vb.u.values[k];
  const SegmentRef X = vb.X.window(p, k), Xb = vb.X.mean_window(k);
  lc.gather(Slot::Drift, X, Xb, ws.ab);
  lc.gather(Slot::Diffusion, X, Xb, ws.as);
  lc.drift_jet(ws.ab, t, uk, ws.Jb);
  lc.diffusion_jet(ws.as, t, uk, ws.Js);

  const LiftedVector Y = to_lifted(g, vb.Y.window(p, k));
  const LiftedVector Ybar = to_lifted(g, vb.Y.mean_window(k));
  const KernelSet& ker = lc.kernels();

  TensorForcing F;
  F.top_bx = detail::head_rows(lc, ws.Jb.x, ws.Jb.xt, ker.bx);
  F.a = ws.Jb.y * Ybar.head() + ws.Jb.yt * kernel_pairing(g, Ybar, ker.by);
  F.e = Mat::Zero(nn, static_cast<Eigen::Index>(w));
  F.C = Mat::Zero(nn, nn);
  const bool spike = vb.active(k);
  if (spike) {
    lc.drift(ws.ab, t, vb.ue.values[k], ws.be);
    lc.drift(ws.ab, t, uk, ws.b);
    lc.diffusion(ws.as, t, vb.ue.values[k], ws.se);
    lc.diffusion(ws.as, t, uk, ws.s);
    F.a += ws.be - ws.b;
  }
  for (std::size_t j = 0; j < w; ++j) {
    const VectorJet& J = ws.Js[j];
    F.top_sx.push_back(detail::head_rows(lc, J.x, J.xt, ker.sx));
    Vec ej = J.y * Ybar.head() + J.yt * kernel_pairing(g, Ybar, ker.sy);
    if (spike) ej += ws.se.col(static_cast<Eigen::Index>(j)) - ws.s.col(static_cast<Eigen::Index>(j));
    const Vec sj = F.top_sx.back() * Y.raw();
    const Vec cj = sj + ej;
    F.C += cj * cj.transpose() - sj * sj.transpose();
    F.e.col(static_cast<Eigen::Index>(j)) = ej;
  }
  return F;
}

/// One Euler-mild step: S [Y + dt(B Y + Y B* + Tr + Phi) + sum_j (Sx_j Y + Y Sx_j* + Psi_j) dW_j] S*.
inline Mat tensor_mild_step(const SegmentGrid& g, const Mat& Yt, const TensorForcing& F, const Vec& Yvec, double dt,
                            const std::vector<double>& dw) {
  const auto n = static_cast<Eigen::Index>(g.n());
  const Vec winv = g.weights().cwiseInverse();
  const Vec w = g.weights();
  auto sym_head = [&](const Mat& top) {
    // R = [top * Yt; 0]; returns R + R*
    Mat R = Mat::Zero(Yt.rows(), Yt.cols());
    R.topRows(n) = top * Yt;
    return Mat(R + winv.asDiagonal() * R.transpose() * w.asDiagonal());
  };
  Mat inc = dt * (sym_head(F.top_bx) + F.phi(g, Yvec));
  for (std::size_t j = 0; j < F.top_sx.size(); ++j) {
    const Mat& top = F.top_sx[j];
    // Sx Yt Sx*: head-head block top Yt Lambda^{-1} top^T
    inc.topLeftCorner(n, n) += dt * (top * Yt * winv.asDiagonal() * top.transpose());
    inc += dw[j] * (sym_head(top) + F.psi(g, Yvec, j));
  }
  return shift_cols_adjoint(g, shift_rows(g, Yt + inc));
}

/// Per-particle mild tensor path driven by the bundle's noise, started from Y0 (zero by default).
inline std::vector<Mat> evolve_tensor_mild(const LiftedCoefficients& lc, const VariationBundle& vb, std::size_t particle,
                                           const Mat* Y0 = nullptr) {
  const SegmentGrid& g = lc.grid();
  require_tensor_dim(g);
  if (particle >= vb.N()) throw ArgumentError("evolve_tensor_mild: particle out of range");
  const auto D = static_cast<Eigen::Index>(g.dim());
  detail::TensorWorkspace ws(g.n(), lc.w());
  std::vector<Mat> out;
  out.reserve(vb.K() + 1);
  out.push_back(Y0 ? *Y0 : Mat::Zero(D, D));
  for (std::size_t k = 0; k < vb.K(); ++k) {
    vb.X.noise.increment(particle, k, ws.dw.data());
    const TensorForcing F = tensor_forcing(lc, vb, particle, k, ws);
    const Vec y = to_lifted(g, vb.Y.window(particle, k)).raw();
    Mat next = tensor_mild_step(g, out.back(), F, y, vb.X.dt, ws.dw);
    if (!next.allFinite()) throw DivergenceError("non-finite tensor state", k + 1);
    out.push_back(std::move(next));
  }
  return out;
}

struct TensorCheckReport {
  std::vector<double> discrepancy;  ///< per step: HS norm of E_N[outer] - E_N[mild]
  std::vector<double> sigma_outer;  ///< per step: HS norm of the elementwise stderr of E_N[outer]
  std::vector<double> sigma_diff;   ///< per step: HS norm of the elementwise stderr of the paired difference
  double max_discrepancy = 0.0;
  std::size_t argmax_step = 0;
  double max_symmetry_defect = 0.0;  ///< relative, over particles and steps
  Mat mean_outer_T, mean_mild_T;
};

/// Ensemble comparison of the outer-product and mild tensor constructions.
///
/// Particles are reduced in fixed blocks so the sums do not depend on the
/// thread count.
inline TensorCheckReport tensor_identity_check(const LiftedCoefficients& lc, const VariationBundle& vb,
                                               const ParallelOptions& par = {}) {
  const SegmentGrid& g = lc.grid();
  require_tensor_dim(g);
  const std::size_t N = vb.N(), K = vb.K();
  const auto D = static_cast<Eigen::Index>(g.dim());
  constexpr std::size_t kBlock = 256;
  const std::size_t blocks = (N + kBlock - 1) / kBlock;
  // per block, per step: sums of outer, outer^2, diff, diff^2
  struct Acc {
    std::vector<Mat> so, so2, sd, sd2;
    double defect = 0.0;
  };
  std::vector<Acc> acc(blocks);
  const Vec wts = g.weights();
  parallel_for(blocks, par, [&](std::size_t b, std::size_t e, unsigned) {
    detail::TensorWorkspace ws(g.n(), lc.w());
    for (std::size_t blk = b; blk < e; ++blk) {
      Acc& A = acc[blk];
      A.so.assign(K + 1, Mat::Zero(D, D));
      A.so2 = A.sd = A.sd2 = A.so;
      for (std::size_t p = blk * kBlock; p < std::min(N, (blk + 1) * kBlock); ++p) {
        Mat Yt = Mat::Zero(D, D);
        for (std::size_t k = 0; k <= K; ++k) {
          const Vec y = to_lifted(g, vb.Y.window(p, k)).raw();
          const Mat outer = y * wts.cwiseProduct(y).transpose();
          const Mat diff = outer - Yt;
          A.so[k] += outer;
          A.so2[k] += outer.cwiseProduct(outer);
          A.sd[k] += diff;
          A.sd2[k] += diff.cwiseProduct(diff);
          if (k == K) break;
          if (k + 1 < vb.k_begin) continue;  // everything is zero before the spike
          vb.X.noise.increment(p, k, ws.dw.data());
          const TensorForcing F = tensor_forcing(lc, vb, p, k, ws);
          Yt = tensor_mild_step(g, Yt, F, y, vb.X.dt, ws.dw);
          if (!Yt.allFinite()) throw DivergenceError("non-finite tensor state", k + 1);
          const double scale = std::max(1e-300, hs_norm(g, Yt));
          A.defect = std::max(A.defect, symmetry_defect(g, Yt) / scale);
        }
      }
    }
  });
  // pairwise fold over blocks
  auto fold = [&](auto member, std::size_t k) {
    std::vector<Mat> parts;
    parts.reserve(blocks);
    for (auto& A : acc) parts.push_back((A.*member)[k]);
    while (parts.size() > 1) {
      std::vector<Mat> next;
      for (std::size_t i = 0; i + 1 < parts.size(); i += 2) next.push_back(parts[i] + parts[i + 1]);
      if (parts.size() % 2) next.push_back(parts.back());
      parts = std::move(next);
    }
    return parts.front();
  };
  TensorCheckReport rep;
  const double Nd = static_cast<double>(N);
  for (const auto& A : acc) rep.max_symmetry_defect = std::max(rep.max_symmetry_defect, A.defect);
  auto stderr_matrix = [&](const Mat& s, const Mat& s2) {
    const Mat mean = s / Nd;
    Mat var = (s2 / Nd - mean.cwiseProduct(mean)).cwiseMax(0.0) * (Nd / std::max(1.0, Nd - 1.0));
    return Mat((var / Nd).cwiseSqrt());
  };
  for (std::size_t k = 0; k <= K; ++k) {
    const Mat so = fold(&Acc::so, k), so2 = fold(&Acc::so2, k), sd = fold(&Acc::sd, k), sd2 = fold(&Acc::sd2, k);
    rep.discrepancy.push_back(hs_norm(g, sd / Nd));
    rep.sigma_outer.push_back(hs_norm(g, stderr_matrix(so, so2)));
    rep.sigma_diff.push_back(hs_norm(g, stderr_matrix(sd, sd2)));
    if (rep.discrepancy.back() > rep.max_discrepancy) {
      rep.max_discrepancy = rep.discrepancy.back();
      rep.argmax_step = k;
    }
    if (k == K) {
      rep.mean_outer_T = so / Nd;
      rep.mean_mild_T = (so - sd) / Nd;
    }
  }
  return rep;
}

}  // namespace mfdelay
