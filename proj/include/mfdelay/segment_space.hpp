#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "mfdelay/errors.hpp"

namespace mfdelay {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Uniform discretization of [-d, 0) with m nodes for an R^n-valued segment.
class SegmentGrid {
 public:
  SegmentGrid() = default;
  SegmentGrid(std::size_t n, std::size_t m, double d) : n_(n), m_(m), d_(d), dtheta_(d / static_cast<double>(m)) {
    if (n == 0) throw ArgumentError("SegmentGrid: n must be positive");
    if (m == 0) throw ArgumentError("SegmentGrid: m must be positive");
    if (!(d > 0.0) || !std::isfinite(d)) throw ArgumentError("SegmentGrid: d must be positive");
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t m() const noexcept { return m_; }
  double d() const noexcept { return d_; }
  double delta_theta() const noexcept { return dtheta_; }
  double node(std::size_t j) const noexcept { return -d_ + static_cast<double>(j) * dtheta_; }
  /// Number of raw coordinates n(1+m).
  std::size_t dim() const noexcept { return n_ * (1 + m_); }

  /// Diagonal of Lambda = diag(I_n, dtheta I_nm).
  Vec weights() const {
    Vec w = Vec::Constant(static_cast<Eigen::Index>(dim()), dtheta_);
    w.head(static_cast<Eigen::Index>(n_)).setOnes();
    return w;
  }

  bool operator==(const SegmentGrid& o) const noexcept { return n_ == o.n_ && m_ == o.m_ && d_ == o.d_; }

 private:
  std::size_t n_ = 1;
  std::size_t m_ = 1;
  double d_ = 1.0;
  double dtheta_ = 1.0;
};

inline void require_same_grid(const SegmentGrid& a, const SegmentGrid& b, const char* where) {
  if (!(a == b)) throw DimensionError(std::string(where) + ": grid mismatch");
}

/// Samples f(theta_j) of a delay kernel; pairing with a segment is left-endpoint quadrature.
struct DelayKernel {
  std::vector<double> values;

  bool empty() const noexcept { return values.empty(); }
  bool is_zero() const noexcept {
    for (double v : values)
      if (v != 0.0) return false;
    return true;
  }

  static DelayKernel zero(const SegmentGrid& g) { return DelayKernel{std::vector<double>(g.m(), 0.0)}; }
  static DelayKernel constant(const SegmentGrid& g, double c) { return DelayKernel{std::vector<double>(g.m(), c)}; }
  static DelayKernel sample(const SegmentGrid& g, const std::function<double(double)>& f) {
    DelayKernel k;
    k.values.resize(g.m());
    for (std::size_t j = 0; j < g.m(); ++j) k.values[j] = f(g.node(j));
    return k;
  }
  /// Discrete point mass at theta = -d: pairing returns the oldest segment node exactly.
  static DelayKernel point_delay(const SegmentGrid& g) {
    DelayKernel k = zero(g);
    k.values[0] = 1.0 / g.delta_theta();
    return k;
  }
};

/// Non-owning view of a lifted element: head (n) and tail (m*n, node-major).
/// History buffers store [tail_0 .. tail_{m-1}, head] contiguously, so a window
/// into a history is a valid view without copying.
struct SegmentRef {
  const double* head;
  const double* tail;
};

/// left-endpoint quadrature dtheta * sum_j f_j tail_j, written into out (size n)
inline void pair_into(const SegmentGrid& g, const double* tail, const DelayKernel& f, double* out) {
  const std::size_t n = g.n();
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.0;
  for (std::size_t j = 0; j < g.m(); ++j) {
    const double fj = f.values[j];
    if (fj == 0.0) continue;
    const double* row = tail + j * n;
    for (std::size_t i = 0; i < n; ++i) out[i] += fj * row[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] *= g.delta_theta();
}

/// Element of H = R^n (+) L^2([-d,0]; R^n) in raw coordinates [head, tail_0, ..., tail_{m-1}].
class LiftedVector {
 public:
  LiftedVector() = default;
  explicit LiftedVector(const SegmentGrid& g) : grid_(g), raw_(Vec::Zero(static_cast<Eigen::Index>(g.dim()))) {}
  LiftedVector(const SegmentGrid& g, Vec raw) : grid_(g), raw_(std::move(raw)) {
    if (static_cast<std::size_t>(raw_.size()) != g.dim()) throw DimensionError("LiftedVector: raw size mismatch");
  }
  LiftedVector(const SegmentGrid& g, const Vec& head, const std::vector<Vec>& tail) : LiftedVector(g) {
    if (static_cast<std::size_t>(head.size()) != g.n() || tail.size() != g.m())
      throw DimensionError("LiftedVector: head/tail shape mismatch");
    this->head() = head;
    for (std::size_t j = 0; j < g.m(); ++j) {
      if (static_cast<std::size_t>(tail[j].size()) != g.n()) throw DimensionError("LiftedVector: tail node size");
      tail_node(j) = tail[j];
    }
  }

  const SegmentGrid& grid() const noexcept { return grid_; }
  const Vec& raw() const noexcept { return raw_; }
  Vec& raw() noexcept { return raw_; }

  Eigen::VectorBlock<Vec> head() { return raw_.head(static_cast<Eigen::Index>(grid_.n())); }
  Eigen::VectorBlock<const Vec> head() const { return raw_.head(static_cast<Eigen::Index>(grid_.n())); }
  Eigen::VectorBlock<Vec> tail_node(std::size_t j) {
    return raw_.segment(static_cast<Eigen::Index>(grid_.n() * (1 + j)), static_cast<Eigen::Index>(grid_.n()));
  }
  Eigen::VectorBlock<const Vec> tail_node(std::size_t j) const {
    return raw_.segment(static_cast<Eigen::Index>(grid_.n() * (1 + j)), static_cast<Eigen::Index>(grid_.n()));
  }
  const double* tail_data() const noexcept { return raw_.data() + grid_.n(); }
  SegmentRef ref() const noexcept { return SegmentRef{raw_.data(), raw_.data() + grid_.n()}; }

  double norm() const;
  bool all_finite() const { return raw_.allFinite(); }

 private:
  SegmentGrid grid_;
  Vec raw_;
};

/// Copy a view into an owning LiftedVector.
inline LiftedVector to_lifted(const SegmentGrid& g, SegmentRef r) {
  LiftedVector v(g);
  const std::size_t n = g.n();
  for (std::size_t i = 0; i < n; ++i) v.raw()[static_cast<Eigen::Index>(i)] = r.head[i];
  for (std::size_t k = 0; k < n * g.m(); ++k) v.raw()[static_cast<Eigen::Index>(n + k)] = r.tail[k];
  return v;
}

/// Weighted inner product x.y + dtheta * sum_j tail_j . tail'_j.
inline double inner(const LiftedVector& x, const LiftedVector& y) {
  require_same_grid(x.grid(), y.grid(), "inner");
  const auto n = static_cast<Eigen::Index>(x.grid().n());
  const auto rest = x.raw().size() - n;
  return x.raw().head(n).dot(y.raw().head(n)) + x.grid().delta_theta() * x.raw().tail(rest).dot(y.raw().tail(rest));
}

inline double LiftedVector::norm() const { return std::sqrt(inner(*this, *this)); }

/// Weighted squared norm of a view.
inline double norm_squared(const SegmentGrid& g, SegmentRef r) {
  double h = 0.0, t = 0.0;
  for (std::size_t i = 0; i < g.n(); ++i) h += r.head[i] * r.head[i];
  for (std::size_t k = 0; k < g.n() * g.m(); ++k) t += r.tail[k] * r.tail[k];
  return h + g.delta_theta() * t;
}

inline LiftedVector embed_G(const SegmentGrid& g, const Vec& z) {
  if (static_cast<std::size_t>(z.size()) != g.n()) throw DimensionError("embed_G: size mismatch");
  LiftedVector v(g);
  v.head() = z;
  return v;
}

inline Vec kernel_pairing(const SegmentGrid& g, const LiftedVector& x, const DelayKernel& f) {
  require_same_grid(g, x.grid(), "kernel_pairing");
  if (f.values.size() != g.m()) throw DimensionError("kernel_pairing: kernel size mismatch");
  Vec out(static_cast<Eigen::Index>(g.n()));
  pair_into(g, x.tail_data(), f, out.data());
  return out;
}

/// e^{k dtheta A}: head kept, tail_j <- tail_{j+k} or the head once theta_j >= -k dtheta.
inline LiftedVector shift_apply(const LiftedVector& x, long k) {
  if (k < 0) throw ArgumentError("shift_apply: negative step count");
  const SegmentGrid& g = x.grid();
  const std::size_t m = g.m();
  const std::size_t kk = static_cast<std::size_t>(k);
  LiftedVector out(g);
  out.head() = x.head();
  for (std::size_t j = 0; j < m; ++j) {
    if (kk >= m || j >= m - kk)
      out.tail_node(j) = x.head();
    else
      out.tail_node(j) = x.tail_node(j + kk);
  }
  return out;
}

/// Adjoint of shift_apply with respect to the weighted inner product (Lambda^{-1} S^T Lambda).
inline LiftedVector shift_adjoint_apply(const LiftedVector& y, long k) {
  if (k < 0) throw ArgumentError("shift_adjoint_apply: negative step count");
  const SegmentGrid& g = y.grid();
  const std::size_t m = g.m();
  const std::size_t kk = static_cast<std::size_t>(k);
  LiftedVector out(g);
  out.head() = y.head();
  const std::size_t first = kk >= m ? 0 : m - kk;
  for (std::size_t j = first; j < m; ++j) out.head() += g.delta_theta() * y.tail_node(j);
  for (std::size_t i = kk; i < m; ++i) out.tail_node(i) = y.tail_node(i - kk);
  return out;
}

/// Raw-coordinate matrix of shift_apply(., k).
inline Mat shift_matrix(const SegmentGrid& g, long k) {
  if (k < 0) throw ArgumentError("shift_matrix: negative step count");
  const auto D = static_cast<Eigen::Index>(g.dim());
  const auto n = static_cast<Eigen::Index>(g.n());
  const auto m = static_cast<Eigen::Index>(g.m());
  Mat S = Mat::Zero(D, D);
  S.topLeftCorner(n, n).setIdentity();
  for (Eigen::Index j = 0; j < m; ++j) {
    const Eigen::Index row = n * (1 + j);
    if (k >= m || j >= m - k)
      S.block(row, 0, n, n).setIdentity();
    else
      S.block(row, n * (1 + j + k), n, n).setIdentity();
  }
  return S;
}

/// Adjoint of a raw-coordinate operator with respect to Lambda: Lambda^{-1} A^T Lambda.
inline Mat lambda_adjoint(const SegmentGrid& g, const Mat& A) {
  const Vec w = g.weights();
  return w.cwiseInverse().asDiagonal() * A.transpose() * w.asDiagonal();
}

/// Hilbert-Schmidt norm of a raw-coordinate operator: ||Lambda^{1/2} A Lambda^{-1/2}||_F.
inline double hs_norm(const SegmentGrid& g, const Mat& A) {
  const Vec s = g.weights().cwiseSqrt();
  return (s.asDiagonal() * A * s.cwiseInverse().asDiagonal()).norm();
}

/// Lambda-self-adjoint part (A + A*)/2.
inline Mat symmetrize(const SegmentGrid& g, const Mat& A) { return 0.5 * (A + lambda_adjoint(g, A)); }

/// HS distance between A and its Lambda-adjoint.
inline double symmetry_defect(const SegmentGrid& g, const Mat& A) { return hs_norm(g, A - lambda_adjoint(g, A)); }

/// S M for the one-step shift, computed by row moves (no dense product).
inline Mat shift_rows(const SegmentGrid& g, const Mat& M) {
  const auto n = static_cast<Eigen::Index>(g.n());
  const auto m = static_cast<Eigen::Index>(g.m());
  Mat out(M.rows(), M.cols());
  out.topRows(n) = M.topRows(n);
  for (Eigen::Index j = 0; j + 1 < m; ++j) out.middleRows(n * (1 + j), n) = M.middleRows(n * (2 + j), n);
  out.middleRows(n * m, n) = M.topRows(n);
  return out;
}

/// M S* for the one-step shift: equals (S M*)*.
inline Mat shift_cols_adjoint(const SegmentGrid& g, const Mat& M) {
  // M Lambda^{-1} S^T Lambda: column c picks the column S maps into row c, then rescales.
  const auto n = static_cast<Eigen::Index>(g.n());
  const auto m = static_cast<Eigen::Index>(g.m());
  Mat out(M.rows(), M.cols());
  out.leftCols(n) = M.leftCols(n);
  for (Eigen::Index j = 0; j + 1 < m; ++j) out.middleCols(n * (1 + j), n) = M.middleCols(n * (2 + j), n);
  out.middleCols(n * m, n) = g.delta_theta() * M.leftCols(n);
  return out;
}

}  // namespace mfdelay
