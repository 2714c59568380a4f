#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mfdelay/errors.hpp"
#include "mfdelay/segment_space.hpp"

namespace mfdelay {

/// Arguments of b, sigma, l, m: (t, x, x~, y, y~, u). Terminal cost ignores t and u.
struct Point {
  double t;
  const Vec& x;
  const Vec& xt;
  const Vec& y;
  const Vec& yt;
  const Vec& u;
};

/// First derivatives of an R^n-valued coefficient: out_i / arg_a in row i, column a.
struct VectorJet {
  Mat x, xt, y, yt;
  explicit VectorJet(std::size_t n = 0) { resize(n); }
  void resize(std::size_t n) {
    const auto k = static_cast<Eigen::Index>(n);
    x.setZero(k, k), xt.setZero(k, k), y.setZero(k, k), yt.setZero(k, k);
  }
  void set_zero() { x.setZero(), xt.setZero(), y.setZero(), yt.setZero(); }
};

/// Second derivatives in (x, x~) per output component i.
/// xxt[i](a, b) = d^2 out_i / dx_a dx~_b.
struct VectorHessian {
  std::vector<Mat> xx, xtxt, xxt;
  explicit VectorHessian(std::size_t n = 0) { resize(n); }
  void resize(std::size_t n) {
    const auto k = static_cast<Eigen::Index>(n);
    xx.assign(n, Mat::Zero(k, k)), xtxt.assign(n, Mat::Zero(k, k)), xxt.assign(n, Mat::Zero(k, k));
  }
  void set_zero() {
    for (std::size_t i = 0; i < xx.size(); ++i) xx[i].setZero(), xtxt[i].setZero(), xxt[i].setZero();
  }
};

struct ScalarJet {
  Vec x, xt, y, yt;
  explicit ScalarJet(std::size_t n = 0) { resize(n); }
  void resize(std::size_t n) {
    const auto k = static_cast<Eigen::Index>(n);
    x.setZero(k), xt.setZero(k), y.setZero(k), yt.setZero(k);
  }
  void set_zero() { x.setZero(), xt.setZero(), y.setZero(), yt.setZero(); }
};

struct ScalarHessian {
  Mat xx, xtxt, xxt;
  explicit ScalarHessian(std::size_t n = 0) { resize(n); }
  void resize(std::size_t n) {
    const auto k = static_cast<Eigen::Index>(n);
    xx.setZero(k, k), xtxt.setZero(k, k), xxt.setZero(k, k);
  }
  void set_zero() { xx.setZero(), xtxt.setZero(), xxt.setZero(); }
};

/// U_ad: either a finite list of points or a box in R^{k_u}.
struct ControlSet {
  std::vector<Vec> points;  ///< finite set when non-empty
  Vec lower, upper;         ///< box otherwise

  bool is_finite() const noexcept { return !points.empty(); }
  std::size_t dim() const {
    if (is_finite()) return static_cast<std::size_t>(points.front().size());
    return static_cast<std::size_t>(lower.size());
  }
  bool contains(const Vec& u, double tol = 1e-12) const {
    if (static_cast<std::size_t>(u.size()) != dim()) return false;
    if (is_finite()) {
      for (const auto& p : points)
        if ((p - u).lpNorm<Eigen::Infinity>() <= tol) return true;
      return false;
    }
    for (Eigen::Index i = 0; i < u.size(); ++i)
      if (u[i] < lower[i] - tol || u[i] > upper[i] + tol) return false;
    return true;
  }
  static ControlSet finite(std::vector<Vec> pts) {
    ControlSet c;
    c.points = std::move(pts);
    return c;
  }
};

inline std::string format_vector(const Vec& v) {
  std::ostringstream os;
  os << '(';
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << ')';
  return os.str();
}

/// The user-facing problem: b, sigma, l, m with first and second derivatives.
///
/// Evaluators receive zero-initialized, correctly shaped outputs and write
/// only their nonzero entries. They must be pure and reentrant.
class CoefficientSet {
 public:
  virtual ~CoefficientSet() = default;

  virtual std::string name() const = 0;
  virtual std::size_t n() const = 0;
  virtual std::size_t w() const = 0;
  virtual std::size_t k_u() const = 0;
  virtual const ControlSet& admissible() const = 0;
  /// B_X, B_Y, Sigma_X, Sigma_Y and H_XX are deterministic along any pair (LQ-type class).
  virtual bool deterministic_derivatives() const { return false; }

  virtual void drift(const Point& p, Vec& out) const = 0;
  virtual void drift_jet(const Point& p, VectorJet& out) const = 0;
  virtual void drift_hessian(const Point& p, VectorHessian& out) const = 0;

  /// sigma as an n x w matrix; column j multiplies dW^j.
  virtual void diffusion(const Point& p, Mat& out) const = 0;
  virtual void diffusion_jet(const Point& p, std::vector<VectorJet>& out) const = 0;
  virtual void diffusion_hessian(const Point& p, std::vector<VectorHessian>& out) const = 0;

  virtual double running(const Point& p) const = 0;
  virtual void running_jet(const Point& p, ScalarJet& out) const = 0;
  virtual void running_hessian(const Point& p, ScalarHessian& out) const = 0;

  virtual double terminal(const Point& p) const = 0;
  virtual void terminal_jet(const Point& p, ScalarJet& out) const = 0;
  virtual void terminal_hessian(const Point& p, ScalarHessian& out) const = 0;
};

/// The eight delay kernels f_bx, f_by, f_sx, f_sy, f_lx, f_ly, f_mx, f_my.
struct KernelSet {
  DelayKernel bx, by, sx, sy, lx, ly, mx, my;

  static KernelSet zeros(const SegmentGrid& g) {
    const auto z = DelayKernel::zero(g);
    return KernelSet{z, z, z, z, z, z, z, z};
  }
  std::vector<const DelayKernel*> all() const { return {&bx, &by, &sx, &sy, &lx, &ly, &mx, &my}; }
};

/// Which coefficient's kernels define the delayed arguments.
enum class Slot { Drift, Diffusion, Running, Terminal };

/// Scratch space for one evaluation point; one per worker.
struct Args {
  Vec x, xt, y, yt;
  explicit Args(std::size_t n = 0) { resize(n); }
  void resize(std::size_t n) {
    const auto k = static_cast<Eigen::Index>(n);
    x.setZero(k), xt.setZero(k), y.setZero(k), yt.setZero(k);
  }
  Point at(double t, const Vec& u) const { return Point{t, x, xt, y, yt, u}; }
};

/// Result of apply_second_forms.
struct SecondForms {
  Vec B;
  Mat Sigma;
  double L = 0.0;
};

/// B, Sigma, L, M on the discretized H and their Frechet derivatives.
class LiftedCoefficients {
 public:
  LiftedCoefficients(std::shared_ptr<const CoefficientSet> coeffs, KernelSet kernels, SegmentGrid grid)
      : c_(std::move(coeffs)), k_(std::move(kernels)), g_(grid) {
    if (!c_) throw ArgumentError("LiftedCoefficients: null coefficient set");
    if (c_->n() != g_.n()) throw DimensionError("LiftedCoefficients: model n differs from grid n");
    for (const DelayKernel* k : k_.all())
      if (k->values.size() != g_.m()) throw DimensionError("LiftedCoefficients: kernel size differs from grid m");
    empty_u_ = Vec::Zero(0);
  }

  const CoefficientSet& coeffs() const noexcept { return *c_; }
  std::shared_ptr<const CoefficientSet> coeffs_ptr() const noexcept { return c_; }
  const KernelSet& kernels() const noexcept { return k_; }
  const SegmentGrid& grid() const noexcept { return g_; }
  std::size_t n() const noexcept { return g_.n(); }
  std::size_t w() const noexcept { return c_->w(); }

  const DelayKernel& kernel_x(Slot s) const noexcept {
    switch (s) {
      case Slot::Drift: return k_.bx;
      case Slot::Diffusion: return k_.sx;
      case Slot::Running: return k_.lx;
      default: return k_.mx;
    }
  }
  const DelayKernel& kernel_y(Slot s) const noexcept {
    switch (s) {
      case Slot::Drift: return k_.by;
      case Slot::Diffusion: return k_.sy;
      case Slot::Running: return k_.ly;
      default: return k_.my;
    }
  }

  /// Fills (x, x~, y, y~) from a particle view and the ensemble-mean view.
  void gather(Slot s, SegmentRef X, SegmentRef Ybar, Args& a) const {
    const std::size_t n = g_.n();
    for (std::size_t i = 0; i < n; ++i) a.x[static_cast<Eigen::Index>(i)] = X.head[i];
    for (std::size_t i = 0; i < n; ++i) a.y[static_cast<Eigen::Index>(i)] = Ybar.head[i];
    pair_into(g_, X.tail, kernel_x(s), a.xt.data());
    pair_into(g_, Ybar.tail, kernel_y(s), a.yt.data());
  }

  const Vec& no_control() const noexcept { return empty_u_; }

  // --- pointwise evaluation with finiteness checks ---------------------------------

  void drift(const Args& a, double t, const Vec& u, Vec& out) const {
    out.setZero(static_cast<Eigen::Index>(n()));
    c_->drift(a.at(t, u), out);
    if (!out.allFinite()) throw EvaluationError("non-finite drift", t, format_vector(u));
  }
  void diffusion(const Args& a, double t, const Vec& u, Mat& out) const {
    out.setZero(static_cast<Eigen::Index>(n()), static_cast<Eigen::Index>(w()));
    c_->diffusion(a.at(t, u), out);
    if (!out.allFinite()) throw EvaluationError("non-finite diffusion", t, format_vector(u));
  }
  void drift_jet(const Args& a, double t, const Vec& u, VectorJet& out) const {
    out.set_zero();
    c_->drift_jet(a.at(t, u), out);
    if (!(out.x.allFinite() && out.xt.allFinite() && out.y.allFinite() && out.yt.allFinite()))
      throw EvaluationError("non-finite drift derivative", t, format_vector(u));
  }
  void diffusion_jet(const Args& a, double t, const Vec& u, std::vector<VectorJet>& out) const {
    for (auto& j : out) j.set_zero();
    c_->diffusion_jet(a.at(t, u), out);
    for (const auto& j : out)
      if (!(j.x.allFinite() && j.xt.allFinite() && j.y.allFinite() && j.yt.allFinite()))
        throw EvaluationError("non-finite diffusion derivative", t, format_vector(u));
  }
  void drift_hessian(const Args& a, double t, const Vec& u, VectorHessian& out) const {
    out.set_zero();
    c_->drift_hessian(a.at(t, u), out);
  }
  void diffusion_hessian(const Args& a, double t, const Vec& u, std::vector<VectorHessian>& out) const {
    for (auto& h : out) h.set_zero();
    c_->diffusion_hessian(a.at(t, u), out);
  }
  double running(const Args& a, double t, const Vec& u) const {
    const double v = c_->running(a.at(t, u));
    if (!std::isfinite(v)) throw EvaluationError("non-finite running cost", t, format_vector(u));
    return v;
  }
  void running_jet(const Args& a, double t, const Vec& u, ScalarJet& out) const {
    out.set_zero();
    c_->running_jet(a.at(t, u), out);
    if (!(out.x.allFinite() && out.xt.allFinite() && out.y.allFinite() && out.yt.allFinite()))
      throw EvaluationError("non-finite running-cost derivative", t, format_vector(u));
  }
  void running_hessian(const Args& a, double t, const Vec& u, ScalarHessian& out) const {
    out.set_zero();
    c_->running_hessian(a.at(t, u), out);
  }
  double terminal(const Args& a) const {
    const double v = c_->terminal(a.at(0.0, empty_u_));
    if (!std::isfinite(v)) throw EvaluationError("non-finite terminal cost", 0.0, "()");
    return v;
  }
  void terminal_jet(const Args& a, ScalarJet& out) const {
    out.set_zero();
    c_->terminal_jet(a.at(0.0, empty_u_), out);
  }
  void terminal_hessian(const Args& a, ScalarHessian& out) const {
    out.set_zero();
    c_->terminal_hessian(a.at(0.0, empty_u_), out);
  }

  // --- lifted operations on LiftedVector arguments ----------------------------------

  LiftedVector eval_B(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    const Args a = args(Slot::Drift, X, Ybar);
    Vec b;
    drift(a, t, u, b);
    return embed_G(g_, b);
  }

  Mat eval_Sigma(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    const Args a = args(Slot::Diffusion, X, Ybar);
    Mat s;
    diffusion(a, t, u, s);
    return s;
  }

  double eval_L(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    return running(args(Slot::Running, X, Ybar), t, u);
  }

  double eval_M(const LiftedVector& X, const LiftedVector& Ybar) const {
    return terminal(args(Slot::Terminal, X, Ybar));
  }

  /// b_x z + b_x~ <Z, f_bx>, embedded in range(G).
  LiftedVector apply_B_X(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                         const LiftedVector& Z) const {
    const VectorJet J = jet_B(t, X, Ybar, u);
    return embed_G(g_, J.x * Z.head() + J.xt * kernel_pairing(g_, Z, k_.bx));
  }
  LiftedVector apply_B_Y(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                         const LiftedVector& Z) const {
    const VectorJet J = jet_B(t, X, Ybar, u);
    return embed_G(g_, J.y * Z.head() + J.yt * kernel_pairing(g_, Z, k_.by));
  }
  LiftedVector apply_B_X_adjoint(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                                 const LiftedVector& P) const {
    const VectorJet J = jet_B(t, X, Ybar, u);
    return covector(J.x.transpose() * P.head(), J.xt.transpose() * P.head(), k_.bx);
  }
  LiftedVector apply_B_Y_adjoint(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                                 const LiftedVector& P) const {
    const VectorJet J = jet_B(t, X, Ybar, u);
    return covector(J.y.transpose() * P.head(), J.yt.transpose() * P.head(), k_.by);
  }
  LiftedVector apply_Sigma_X(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                             const LiftedVector& Z, std::size_t col) const {
    const auto J = jet_Sigma(t, X, Ybar, u);
    return embed_G(g_, J.at(col).x * Z.head() + J.at(col).xt * kernel_pairing(g_, Z, k_.sx));
  }
  LiftedVector apply_Sigma_Y(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                             const LiftedVector& Z, std::size_t col) const {
    const auto J = jet_Sigma(t, X, Ybar, u);
    return embed_G(g_, J.at(col).y * Z.head() + J.at(col).yt * kernel_pairing(g_, Z, k_.sy));
  }
  LiftedVector apply_Sigma_X_adjoint(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                                     const LiftedVector& P, std::size_t col) const {
    const auto J = jet_Sigma(t, X, Ybar, u);
    return covector(J.at(col).x.transpose() * P.head(), J.at(col).xt.transpose() * P.head(), k_.sx);
  }
  LiftedVector apply_Sigma_Y_adjoint(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                                     const LiftedVector& P, std::size_t col) const {
    const auto J = jet_Sigma(t, X, Ybar, u);
    return covector(J.at(col).y.transpose() * P.head(), J.at(col).yt.transpose() * P.head(), k_.sy);
  }

  /// Riesz representers of L_X, L_Y, M_X, M_Y.
  LiftedVector L_X(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    ScalarJet j(n());
    running_jet(args(Slot::Running, X, Ybar), t, u, j);
    return covector(j.x, j.xt, k_.lx);
  }
  LiftedVector L_Y(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    ScalarJet j(n());
    running_jet(args(Slot::Running, X, Ybar), t, u, j);
    return covector(j.y, j.yt, k_.ly);
  }
  LiftedVector M_X(const LiftedVector& X, const LiftedVector& Ybar) const {
    ScalarJet j(n());
    terminal_jet(args(Slot::Terminal, X, Ybar), j);
    return covector(j.x, j.xt, k_.mx);
  }
  LiftedVector M_Y(const LiftedVector& X, const LiftedVector& Ybar) const {
    ScalarJet j(n());
    terminal_jet(args(Slot::Terminal, X, Ybar), j);
    return covector(j.y, j.yt, k_.my);
  }

  SecondForms apply_second_forms(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                                 const LiftedVector& Z1, const LiftedVector& Z2) const {
    SecondForms out;
    const std::size_t nn = n();
    {
      VectorHessian H(nn);
      drift_hessian(args(Slot::Drift, X, Ybar), t, u, H);
      const Vec z1 = Z1.head(), z2 = Z2.head();
      const Vec p1 = kernel_pairing(g_, Z1, k_.bx), p2 = kernel_pairing(g_, Z2, k_.bx);
      out.B = bilinear(H, z1, p1, z2, p2);
    }
    {
      std::vector<VectorHessian> H(w(), VectorHessian(nn));
      diffusion_hessian(args(Slot::Diffusion, X, Ybar), t, u, H);
      const Vec z1 = Z1.head(), z2 = Z2.head();
      const Vec p1 = kernel_pairing(g_, Z1, k_.sx), p2 = kernel_pairing(g_, Z2, k_.sx);
      out.Sigma.resize(static_cast<Eigen::Index>(nn), static_cast<Eigen::Index>(w()));
      for (std::size_t c = 0; c < w(); ++c) out.Sigma.col(static_cast<Eigen::Index>(c)) = bilinear(H[c], z1, p1, z2, p2);
    }
    {
      ScalarHessian H(nn);
      running_hessian(args(Slot::Running, X, Ybar), t, u, H);
      out.L = scalar_form(H, Z1.head(), kernel_pairing(g_, Z1, k_.lx), Z2.head(), kernel_pairing(g_, Z2, k_.lx));
    }
    return out;
  }

  double apply_M_XX(const LiftedVector& X, const LiftedVector& Ybar, const LiftedVector& Z1,
                    const LiftedVector& Z2) const {
    ScalarHessian H(n());
    terminal_hessian(args(Slot::Terminal, X, Ybar), H);
    return scalar_form(H, Z1.head(), kernel_pairing(g_, Z1, k_.mx), Z2.head(), kernel_pairing(g_, Z2, k_.mx));
  }

  Mat matrix_of_L_XX(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    ScalarHessian H(n());
    running_hessian(args(Slot::Running, X, Ybar), t, u, H);
    return matrix_of_form(H, k_.lx);
  }
  Mat matrix_of_M_XX(const LiftedVector& X, const LiftedVector& Ybar) const {
    ScalarHessian H(n());
    terminal_hessian(args(Slot::Terminal, X, Ybar), H);
    return matrix_of_form(H, k_.mx);
  }

  /// Operator whose bilinear form is [z1; <Z1,f>]^T H [z2; <Z2,f>].
  Mat matrix_of_form(const ScalarHessian& H, const DelayKernel& f) const {
    const Mat J = pairing_map(f);
    const Mat blk = block_hessian(H);
    return g_.weights().cwiseInverse().asDiagonal() * (J.transpose() * blk.transpose() * J);
  }

  /// (2n x D) map Z -> [z; <Z, f>].
  Mat pairing_map(const DelayKernel& f) const {
    const auto nn = static_cast<Eigen::Index>(n());
    Mat J = Mat::Zero(2 * nn, static_cast<Eigen::Index>(g_.dim()));
    J.topLeftCorner(nn, nn).setIdentity();
    for (std::size_t j = 0; j < g_.m(); ++j)
      J.block(nn, nn * static_cast<Eigen::Index>(1 + j), nn, nn) =
          Mat::Identity(nn, nn) * (g_.delta_theta() * f.values[j]);
    return J;
  }

  /// Raw matrix of Z -> G(A z + At <Z, f>): only head rows are nonzero.
  Mat matrix_of_head_operator(const Mat& A, const Mat& At, const DelayKernel& f) const {
    const auto nn = static_cast<Eigen::Index>(n());
    Mat M = Mat::Zero(static_cast<Eigen::Index>(g_.dim()), static_cast<Eigen::Index>(g_.dim()));
    Mat top(nn, 2 * nn);
    top << A, At;
    M.topRows(nn) = top * pairing_map(f);
    return M;
  }

  Mat matrix_of_B_X(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    const VectorJet J = jet_B(t, X, Ybar, u);
    return matrix_of_head_operator(J.x, J.xt, k_.bx);
  }
  Mat matrix_of_B_Y(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    const VectorJet J = jet_B(t, X, Ybar, u);
    return matrix_of_head_operator(J.y, J.yt, k_.by);
  }
  Mat matrix_of_Sigma_X(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                        std::size_t col) const {
    const auto J = jet_Sigma(t, X, Ybar, u);
    return matrix_of_head_operator(J.at(col).x, J.at(col).xt, k_.sx);
  }
  Mat matrix_of_Sigma_Y(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u,
                        std::size_t col) const {
    const auto J = jet_Sigma(t, X, Ybar, u);
    return matrix_of_head_operator(J.at(col).y, J.at(col).yt, k_.sy);
  }

  /// Lifted covector (a, f_j * at) representing z -> a.z + at.<Z, f>.
  LiftedVector covector(const Vec& a, const Vec& at, const DelayKernel& f) const {
    LiftedVector v(g_);
    v.head() = a;
    for (std::size_t j = 0; j < g_.m(); ++j) v.tail_node(j) = f.values[j] * at;
    return v;
  }

  static Mat block_hessian(const ScalarHessian& H) {
    const auto nn = H.xx.rows();
    Mat blk(2 * nn, 2 * nn);
    blk << H.xx, H.xxt, H.xxt.transpose(), H.xtxt;
    return blk;
  }

  /// [z1;p1]^T [[xx, xxt],[xxt^T, xtxt]] [z2;p2] per output component.
  static Vec bilinear(const VectorHessian& H, const Vec& z1, const Vec& p1, const Vec& z2, const Vec& p2) {
    Vec out(static_cast<Eigen::Index>(H.xx.size()));
    for (std::size_t i = 0; i < H.xx.size(); ++i)
      out[static_cast<Eigen::Index>(i)] = z1.dot(H.xx[i] * z2) + z1.dot(H.xxt[i] * p2) + p1.dot(H.xxt[i].transpose() * z2) +
                                          p1.dot(H.xtxt[i] * p2);
    return out;
  }
  static double scalar_form(const ScalarHessian& H, const Vec& z1, const Vec& p1, const Vec& z2, const Vec& p2) {
    return z1.dot(H.xx * z2) + z1.dot(H.xxt * p2) + p1.dot(H.xxt.transpose() * z2) + p1.dot(H.xtxt * p2);
  }

  Args args(Slot s, const LiftedVector& X, const LiftedVector& Ybar) const {
    require_same_grid(g_, X.grid(), "LiftedCoefficients");
    require_same_grid(g_, Ybar.grid(), "LiftedCoefficients");
    Args a(n());
    gather(s, X.ref(), Ybar.ref(), a);
    return a;
  }

  VectorJet jet_B(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    VectorJet J(n());
    drift_jet(args(Slot::Drift, X, Ybar), t, u, J);
    return J;
  }
  std::vector<VectorJet> jet_Sigma(double t, const LiftedVector& X, const LiftedVector& Ybar, const Vec& u) const {
    std::vector<VectorJet> J(w(), VectorJet(n()));
    diffusion_jet(args(Slot::Diffusion, X, Ybar), t, u, J);
    return J;
  }

 private:
  std::shared_ptr<const CoefficientSet> c_;
  KernelSet k_;
  SegmentGrid g_;
  Vec empty_u_;
};

// ------------------------------------------------------------------------------------
// finite-difference validation

struct DerivativeReport {
  std::map<std::string, double> max_relative_error;
  std::vector<std::string> warnings;

  double worst() const {
    double w = 0.0;
    for (const auto& [k, v] : max_relative_error) w = std::max(w, v);
    return w;
  }
  /// Slots whose error exceeds tol.
  std::vector<std::string> flagged(double tol) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : max_relative_error)
      if (!(v <= tol)) out.push_back(k);
    return out;
  }
};

namespace detail {

inline void record(DerivativeReport& r, const std::string& slot, const Mat& declared, const Mat& fd) {
  double e = 0.0;
  for (Eigen::Index i = 0; i < declared.rows(); ++i)
    for (Eigen::Index j = 0; j < declared.cols(); ++j)
      e = std::max(e, std::abs(declared(i, j) - fd(i, j)) / std::max(1.0, std::abs(declared(i, j))));
  if (!std::isfinite(e)) e = std::numeric_limits<double>::infinity();
  auto& cur = r.max_relative_error[slot];
  cur = std::max(cur, e);
}

inline Vec& arg_ref(Vec& x, Vec& xt, Vec& y, Vec& yt, int which) {
  switch (which) {
    case 0: return x;
    case 1: return xt;
    case 2: return y;
    default: return yt;
  }
}

/// Vector-valued function of the point, returned as a flat column.
template <class F>
Mat fd_jacobian(F&& f, double t, Vec x, Vec xt, Vec y, Vec yt, const Vec& u, int which, double h) {
  Vec& a = arg_ref(x, xt, y, yt, which);
  const Vec base = f(Point{t, x, xt, y, yt, u});
  Mat J(base.size(), a.size());
  for (Eigen::Index c = 0; c < a.size(); ++c) {
    const double keep = a[c];
    a[c] = keep + h;
    const Vec fp = f(Point{t, x, xt, y, yt, u});
    a[c] = keep - h;
    const Vec fm = f(Point{t, x, xt, y, yt, u});
    a[c] = keep;
    J.col(c) = (fp - fm) / (2.0 * h);
  }
  return J;
}

inline Mat flatten(const std::vector<Mat>& ms) {
  if (ms.empty()) return Mat();
  Mat out(ms.size() * static_cast<std::size_t>(ms[0].rows()), ms[0].cols());
  for (std::size_t i = 0; i < ms.size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * ms[0].rows(), ms[0].rows()) = ms[i];
  return out;
}

}  // namespace detail

/// Compares every declared derivative against central differences at `count` random points.
inline DerivativeReport check_derivatives(const CoefficientSet& cs, std::size_t count, double h,
                                          std::uint64_t seed = 20240611) {
  if (!(h > 0.0)) throw ArgumentError("check_derivatives: h must be positive");
  using detail::fd_jacobian;
  using detail::record;
  const std::size_t n = cs.n(), w = cs.w();
  const auto N = static_cast<Eigen::Index>(n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  DerivativeReport rep;
  const char* arg_names[4] = {"x", "xt", "y", "yt"};

  for (std::size_t s = 0; s < count; ++s) {
    const double t = unif(rng);
    Vec x(N), xt(N), y(N), yt(N);
    for (Vec* v : {&x, &xt, &y, &yt})
      for (Eigen::Index i = 0; i < N; ++i) (*v)[i] = normal(rng);
    Vec u;
    const ControlSet& U = cs.admissible();
    if (U.is_finite()) {
      u = U.points[static_cast<std::size_t>(unif(rng) * static_cast<double>(U.points.size())) % U.points.size()];
    } else {
      u = U.lower;
      for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = U.lower[i] + unif(rng) * (U.upper[i] - U.lower[i]);
    }
    const Point P{t, x, xt, y, yt, u};

    auto drift = [&](const Point& p) {
      Vec o = Vec::Zero(N);
      cs.drift(p, o);
      return o;
    };
    auto drift_jet = [&](const Point& p) {
      VectorJet j(n);
      cs.drift_jet(p, j);
      return j;
    };
    auto sigma_col = [&](std::size_t c) {
      return [&, c](const Point& p) {
        Mat o = Mat::Zero(N, static_cast<Eigen::Index>(w));
        cs.diffusion(p, o);
        return Vec(o.col(static_cast<Eigen::Index>(c)));
      };
    };
    auto sigma_jet = [&](const Point& p) {
      std::vector<VectorJet> j(w, VectorJet(n));
      cs.diffusion_jet(p, j);
      return j;
    };
    auto scalar = [&](bool terminal) {
      return [&, terminal](const Point& p) {
        Vec o(1);
        o[0] = terminal ? cs.terminal(p) : cs.running(p);
        return o;
      };
    };
    auto sjet = [&](bool terminal, const Point& p) {
      ScalarJet j(n);
      if (terminal)
        cs.terminal_jet(p, j);
      else
        cs.running_jet(p, j);
      return j;
    };

    // first derivatives
    const VectorJet bj = drift_jet(P);
    const Mat* bjs[4] = {&bj.x, &bj.xt, &bj.y, &bj.yt};
    for (int a = 0; a < 4; ++a)
      record(rep, std::string("b_") + arg_names[a], *bjs[a], fd_jacobian(drift, t, x, xt, y, yt, u, a, h));
    const auto sj = sigma_jet(P);
    for (std::size_t c = 0; c < w; ++c) {
      const Mat* sjs[4] = {&sj[c].x, &sj[c].xt, &sj[c].y, &sj[c].yt};
      for (int a = 0; a < 4; ++a)
        record(rep, std::string("sigma_") + arg_names[a], *sjs[a], fd_jacobian(sigma_col(c), t, x, xt, y, yt, u, a, h));
    }
    for (bool terminal : {false, true}) {
      const ScalarJet j = sjet(terminal, P);
      const Vec* js[4] = {&j.x, &j.xt, &j.y, &j.yt};
      const std::string pre = terminal ? "m_" : "l_";
      for (int a = 0; a < 4; ++a)
        record(rep, pre + arg_names[a], js[a]->transpose(), fd_jacobian(scalar(terminal), t, x, xt, y, yt, u, a, h));
    }

    // second derivatives: differentiate the declared jets; mixed partials along both routes
    auto check_vector_hessian = [&](const std::string& pre, const VectorHessian& H, auto&& jet_of) {
      // jet_of(p) returns the VectorJet of the coefficient (or column)
      auto jx = [&](const Point& p) { return Vec(Eigen::Map<const Vec>(jet_of(p).x.data(), N * N)); };
      auto jxt = [&](const Point& p) { return Vec(Eigen::Map<const Vec>(jet_of(p).xt.data(), N * N)); };
      const Mat dxx = fd_jacobian(jx, t, x, xt, y, yt, u, 0, h);    // rows (i,a) col-major, cols c
      const Mat dtt = fd_jacobian(jxt, t, x, xt, y, yt, u, 1, h);
      const Mat dxt_a = fd_jacobian(jx, t, x, xt, y, yt, u, 1, h);  // d/dx~_b of b_x(i,a)
      const Mat dxt_b = fd_jacobian(jxt, t, x, xt, y, yt, u, 0, h); // d/dx_a of b_x~(i,b)
      std::vector<Mat> fxx(n, Mat(N, N)), ftt(n, Mat(N, N)), fxt1(n, Mat(N, N)), fxt2(n, Mat(N, N));
      for (std::size_t i = 0; i < n; ++i)
        for (Eigen::Index a = 0; a < N; ++a)
          for (Eigen::Index c = 0; c < N; ++c) {
            const Eigen::Index row = static_cast<Eigen::Index>(i) + a * N;  // column-major (i, a)
            fxx[i](a, c) = dxx(row, c);
            ftt[i](a, c) = dtt(row, c);
            fxt1[i](a, c) = dxt_a(row, c);
            fxt2[i](c, a) = dxt_b(row, c);
          }
      record(rep, pre + "xx", detail::flatten(H.xx), detail::flatten(fxx));
      record(rep, pre + "xtxt", detail::flatten(H.xtxt), detail::flatten(ftt));
      record(rep, pre + "xxt", detail::flatten(H.xxt), detail::flatten(fxt1));
      record(rep, pre + "xxt", detail::flatten(H.xxt), detail::flatten(fxt2));
      for (std::size_t i = 0; i < n; ++i) {
        const double asym = std::max((H.xx[i] - H.xx[i].transpose()).lpNorm<Eigen::Infinity>(),
                                     (H.xtxt[i] - H.xtxt[i].transpose()).lpNorm<Eigen::Infinity>());
        const double mixed = (fxt1[i] - fxt2[i]).lpNorm<Eigen::Infinity>() / std::max(1.0, H.xxt[i].lpNorm<Eigen::Infinity>());
        if (asym > 1e-8) rep.warnings.push_back(pre + ": declared second derivative not symmetric");
        if (mixed > 1e-6) rep.warnings.push_back(pre + "xxt: mixed partials differ between orders");
      }
    };
    {
      VectorHessian H(n);
      cs.drift_hessian(P, H);
      check_vector_hessian("b_", H, drift_jet);
    }
    {
      std::vector<VectorHessian> H(w, VectorHessian(n));
      cs.diffusion_hessian(P, H);
      for (std::size_t c = 0; c < w; ++c)
        check_vector_hessian("sigma_", H[c], [&, c](const Point& p) { return sigma_jet(p)[c]; });
    }
    for (bool terminal : {false, true}) {
      ScalarHessian H(n);
      if (terminal)
        cs.terminal_hessian(P, H);
      else
        cs.running_hessian(P, H);
      const std::string pre = terminal ? "m_" : "l_";
      auto gx = [&](const Point& p) { return sjet(terminal, p).x; };
      auto gxt = [&](const Point& p) { return sjet(terminal, p).xt; };
      record(rep, pre + "xx", H.xx, fd_jacobian(gx, t, x, xt, y, yt, u, 0, h));
      record(rep, pre + "xtxt", H.xtxt, fd_jacobian(gxt, t, x, xt, y, yt, u, 1, h));
      record(rep, pre + "xxt", H.xxt, fd_jacobian(gx, t, x, xt, y, yt, u, 1, h));
      record(rep, pre + "xxt", H.xxt, fd_jacobian(gxt, t, x, xt, y, yt, u, 0, h).transpose());
      if ((H.xx - H.xx.transpose()).lpNorm<Eigen::Infinity>() > 1e-8 ||
          (H.xtxt - H.xtxt.transpose()).lpNorm<Eigen::Infinity>() > 1e-8)
        rep.warnings.push_back(pre + ": declared second derivative not symmetric");
    }
  }
  std::sort(rep.warnings.begin(), rep.warnings.end());
  rep.warnings.erase(std::unique(rep.warnings.begin(), rep.warnings.end()), rep.warnings.end());
  return rep;
}

}  // namespace mfdelay
