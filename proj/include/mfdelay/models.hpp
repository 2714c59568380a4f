#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>

#include "mfdelay/errors.hpp"
#include "mfdelay/model.hpp"

namespace mfdelay {

using ParamMap = std::map<std::string, double>;

inline double param(const ParamMap& p, const std::string& key, double fallback) {
  const auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}

/// Linear dynamics with delayed and mean-field drift, control in drift and
/// diffusion, quadratic cost. Componentwise in R^n; the scalar control acts on
/// every component and the first noise column.
///
///   b   = a x + a_d x~ + kappa y + kappa_d y~ + beta u
///   s_0 = (c + s u) x + kappa_s y + sigma0 + s_add u,  s_j = c x + sigma0 (j > 0)
///   l   = q|x|^2/2 + q_d|x~|^2/2 + kappa_l x.y + r u^2/2 + rho u
///   m   = g|x|^2/2 + g_d|x~|^2/2 + h sum(x) + kappa_m x.y
class LinearQuadraticModel : public CoefficientSet {
 public:
  struct Params {
    double a = -0.5, a_d = 0.5, beta = 0.5;
    double c = 0.2, s = 0.5, s_add = 0.0, sigma0 = 0.3;
    double q = 1.0, q_d = 0.0, r = 0.2, rho = 0.0;
    double g = 1.0, g_d = 0.0, h = 0.0;
    double kappa = 0.0, kappa_d = 0.0, kappa_s = 0.0, kappa_l = 0.0, kappa_m = 0.0;
  };

  LinearQuadraticModel(std::string name, std::size_t n, std::size_t w, Params p, ControlSet U)
      : name_(std::move(name)), n_(n), w_(w), p_(p), U_(std::move(U)) {
    if (U_.dim() != 1) throw ConfigError(name_ + ": control dimension must be 1");
  }

  std::string name() const override { return name_; }
  std::size_t n() const override { return n_; }
  std::size_t w() const override { return w_; }
  std::size_t k_u() const override { return 1; }
  const ControlSet& admissible() const override { return U_; }
  bool deterministic_derivatives() const override { return true; }
  const Params& params() const noexcept { return p_; }

  void drift(const Point& P, Vec& out) const override {
    out = p_.a * P.x + p_.a_d * P.xt + p_.kappa * P.y + p_.kappa_d * P.yt;
    out.array() += p_.beta * P.u[0];
  }
  void drift_jet(const Point&, VectorJet& J) const override {
    J.x.diagonal().setConstant(p_.a);
    J.xt.diagonal().setConstant(p_.a_d);
    J.y.diagonal().setConstant(p_.kappa);
    J.yt.diagonal().setConstant(p_.kappa_d);
  }
  void drift_hessian(const Point&, VectorHessian&) const override {}

  void diffusion(const Point& P, Mat& out) const override {
    const double u = P.u[0];
    for (std::size_t j = 0; j < w_; ++j) {
      auto col = out.col(static_cast<Eigen::Index>(j));
      if (j == 0) {
        col = (p_.c + p_.s * u) * P.x + p_.kappa_s * P.y;
        col.array() += p_.sigma0 + p_.s_add * u;
      } else {
        col = p_.c * P.x;
        col.array() += p_.sigma0;
      }
    }
  }
  void diffusion_jet(const Point& P, std::vector<VectorJet>& J) const override {
    for (std::size_t j = 0; j < w_; ++j) {
      J[j].x.diagonal().setConstant(j == 0 ? p_.c + p_.s * P.u[0] : p_.c);
      if (j == 0) J[j].y.diagonal().setConstant(p_.kappa_s);
    }
  }
  void diffusion_hessian(const Point&, std::vector<VectorHessian>&) const override {}

  double running(const Point& P) const override {
    const double u = P.u[0];
    return 0.5 * p_.q * P.x.squaredNorm() + 0.5 * p_.q_d * P.xt.squaredNorm() + p_.kappa_l * P.x.dot(P.y) +
           0.5 * p_.r * u * u + p_.rho * u;
  }
  void running_jet(const Point& P, ScalarJet& J) const override {
    J.x = p_.q * P.x + p_.kappa_l * P.y;
    J.xt = p_.q_d * P.xt;
    J.y = p_.kappa_l * P.x;
  }
  void running_hessian(const Point&, ScalarHessian& H) const override {
    H.xx.diagonal().setConstant(p_.q);
    H.xtxt.diagonal().setConstant(p_.q_d);
  }

  double terminal(const Point& P) const override {
    return 0.5 * p_.g * P.x.squaredNorm() + 0.5 * p_.g_d * P.xt.squaredNorm() + p_.h * P.x.sum() +
           p_.kappa_m * P.x.dot(P.y);
  }
  void terminal_jet(const Point& P, ScalarJet& J) const override {
    J.x = p_.g * P.x + p_.kappa_m * P.y;
    J.x.array() += p_.h;
    J.xt = p_.g_d * P.xt;
    J.y = p_.kappa_m * P.x;
  }
  void terminal_hessian(const Point&, ScalarHessian& H) const override {
    H.xx.diagonal().setConstant(p_.g);
    H.xtxt.diagonal().setConstant(p_.g_d);
  }

 private:
  std::string name_;
  std::size_t n_, w_;
  Params p_;
  ControlSet U_;
};

/// Bounded-derivative nonlinear model (componentwise):
///
///   b_i    = -a tanh x_i + a_d tanh x~_i + kappa tanh(y_i - x_i) + gamma sin x_i cos x~_i + kappa_d tanh y~_i + beta u
///   s_ij   = sigma0 + c sin x~_i + kappa_s tanh y_i + [j = 0] s u (1 + tanh(x_i)/2)
///   l      = sum q x_i^2/2 + q_c log cosh x~_i + kappa_l x_i tanh y_i  + r u^2/2
///   m      = sum g x_i^2/2 + h tanh x_i + g_c cos x~_i + kappa_m x_i y_i
class SmoothNonlinearModel : public CoefficientSet {
 public:
  struct Params {
    double a = 1.0, a_d = 0.5, kappa = 0.2, gamma = 0.3, kappa_d = 0.1, beta = 0.5;
    double sigma0 = 0.3, c = 0.2, kappa_s = 0.1, s = 0.4;
    double q = 1.0, q_c = 0.3, kappa_l = 0.2, r = 0.2;
    double g = 1.0, h = 0.5, g_c = 0.2, kappa_m = 0.1;
  };

  SmoothNonlinearModel(std::size_t n, std::size_t w, Params p, ControlSet U)
      : n_(n), w_(w), p_(p), U_(std::move(U)) {
    if (U_.dim() != 1) throw ConfigError("smooth_nonlinear: control dimension must be 1");
  }

  std::string name() const override { return "smooth_nonlinear"; }
  std::size_t n() const override { return n_; }
  std::size_t w() const override { return w_; }
  std::size_t k_u() const override { return 1; }
  const ControlSet& admissible() const override { return U_; }

  void drift(const Point& P, Vec& out) const override {
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const double x = P.x[i], xt = P.xt[i];
      out[i] = -p_.a * std::tanh(x) + p_.a_d * std::tanh(xt) + p_.kappa * std::tanh(P.y[i] - x) +
               p_.gamma * std::sin(x) * std::cos(xt) + p_.kappa_d * std::tanh(P.yt[i]) + p_.beta * P.u[0];
    }
  }
  void drift_jet(const Point& P, VectorJet& J) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i) {
      const double x = P.x[i], xt = P.xt[i], z = P.y[i] - x;
      J.x(i, i) = -p_.a * sech2(x) - p_.kappa * sech2(z) + p_.gamma * std::cos(x) * std::cos(xt);
      J.xt(i, i) = p_.a_d * sech2(xt) - p_.gamma * std::sin(x) * std::sin(xt);
      J.y(i, i) = p_.kappa * sech2(z);
      J.yt(i, i) = p_.kappa_d * sech2(P.yt[i]);
    }
  }
  void drift_hessian(const Point& P, VectorHessian& H) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i) {
      const double x = P.x[i], xt = P.xt[i], z = P.y[i] - x;
      const auto k = static_cast<std::size_t>(i);
      H.xx[k](i, i) = 2.0 * p_.a * sech2(x) * std::tanh(x) - 2.0 * p_.kappa * sech2(z) * std::tanh(z) -
                      p_.gamma * std::sin(x) * std::cos(xt);
      H.xtxt[k](i, i) = -2.0 * p_.a_d * sech2(xt) * std::tanh(xt) - p_.gamma * std::sin(x) * std::cos(xt);
      H.xxt[k](i, i) = -p_.gamma * std::cos(x) * std::sin(xt);
    }
  }

  void diffusion(const Point& P, Mat& out) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j) {
        out(i, j) = p_.sigma0 + p_.c * std::sin(P.xt[i]) + p_.kappa_s * std::tanh(P.y[i]);
        if (j == 0) out(i, j) += p_.s * P.u[0] * (1.0 + 0.5 * std::tanh(P.x[i]));
      }
  }
  void diffusion_jet(const Point& P, std::vector<VectorJet>& J) const override {
    for (std::size_t j = 0; j < w_; ++j)
      for (Eigen::Index i = 0; i < P.x.size(); ++i) {
        if (j == 0) J[j].x(i, i) = 0.5 * p_.s * P.u[0] * sech2(P.x[i]);
        J[j].xt(i, i) = p_.c * std::cos(P.xt[i]);
        J[j].y(i, i) = p_.kappa_s * sech2(P.y[i]);
      }
  }
  void diffusion_hessian(const Point& P, std::vector<VectorHessian>& H) const override {
    for (std::size_t j = 0; j < w_; ++j)
      for (Eigen::Index i = 0; i < P.x.size(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (j == 0) H[j].xx[k](i, i) = -p_.s * P.u[0] * sech2(P.x[i]) * std::tanh(P.x[i]);
        H[j].xtxt[k](i, i) = -p_.c * std::sin(P.xt[i]);
      }
  }

  double running(const Point& P) const override {
    double v = 0.5 * p_.r * P.u[0] * P.u[0];
    for (Eigen::Index i = 0; i < P.x.size(); ++i)
      v += 0.5 * p_.q * P.x[i] * P.x[i] + p_.q_c * std::log(std::cosh(P.xt[i])) + p_.kappa_l * P.x[i] * std::tanh(P.y[i]);
    return v;
  }
  void running_jet(const Point& P, ScalarJet& J) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i) {
      J.x[i] = p_.q * P.x[i] + p_.kappa_l * std::tanh(P.y[i]);
      J.xt[i] = p_.q_c * std::tanh(P.xt[i]);
      J.y[i] = p_.kappa_l * P.x[i] * sech2(P.y[i]);
    }
  }
  void running_hessian(const Point& P, ScalarHessian& H) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i) {
      H.xx(i, i) = p_.q;
      H.xtxt(i, i) = p_.q_c * sech2(P.xt[i]);
    }
  }

  double terminal(const Point& P) const override {
    double v = 0.0;
    for (Eigen::Index i = 0; i < P.x.size(); ++i)
      v += 0.5 * p_.g * P.x[i] * P.x[i] + p_.h * std::tanh(P.x[i]) + p_.g_c * std::cos(P.xt[i]) + p_.kappa_m * P.x[i] * P.y[i];
    return v;
  }
  void terminal_jet(const Point& P, ScalarJet& J) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i) {
      J.x[i] = p_.g * P.x[i] + p_.h * sech2(P.x[i]) + p_.kappa_m * P.y[i];
      J.xt[i] = -p_.g_c * std::sin(P.xt[i]);
      J.y[i] = p_.kappa_m * P.x[i];
    }
  }
  void terminal_hessian(const Point& P, ScalarHessian& H) const override {
    for (Eigen::Index i = 0; i < P.x.size(); ++i) {
      H.xx(i, i) = p_.g - 2.0 * p_.h * sech2(P.x[i]) * std::tanh(P.x[i]);
      H.xtxt(i, i) = -p_.g_c * std::cos(P.xt[i]);
    }
  }

 private:
  static double sech2(double z) {
    const double c = std::cosh(z);
    return 1.0 / (c * c);
  }
  std::size_t n_, w_;
  Params p_;
  ControlSet U_;
};

/// A model plus the kernels it is meant to be lifted with.
struct BuiltModel {
  std::shared_ptr<const CoefficientSet> coeffs;
  KernelSet kernels;
};

inline ControlSet default_controls() { return ControlSet::finite({Vec::Constant(1, 0.0), Vec::Constant(1, 1.0)}); }

namespace detail {

inline LinearQuadraticModel::Params lq_params(const ParamMap& m, double coupling) {
  LinearQuadraticModel::Params p;
  p.a = param(m, "a", p.a), p.a_d = param(m, "a_d", p.a_d), p.beta = param(m, "beta", p.beta);
  p.c = param(m, "c", p.c), p.s = param(m, "s", p.s), p.s_add = param(m, "s_add", p.s_add);
  p.sigma0 = param(m, "sigma0", p.sigma0);
  p.q = param(m, "q", p.q), p.q_d = param(m, "q_d", p.q_d), p.r = param(m, "r", p.r), p.rho = param(m, "rho", p.rho);
  p.g = param(m, "g", p.g), p.g_d = param(m, "g_d", p.g_d), p.h = param(m, "h", p.h);
  p.kappa = param(m, "kappa", coupling), p.kappa_d = param(m, "kappa_d", coupling);
  p.kappa_s = param(m, "kappa_s", coupling), p.kappa_l = param(m, "kappa_l", coupling);
  p.kappa_m = param(m, "kappa_m", coupling);
  return p;
}

/// kernel code: 0 uniform 1/d, 1 point mass at -d, 2 linear ramp 2(1+theta/d)/d
inline DelayKernel kernel_by_code(const SegmentGrid& g, double code) {
  const double d = g.d();
  switch (static_cast<int>(code)) {
    case 1: return DelayKernel::point_delay(g);
    case 2: return DelayKernel::sample(g, [d](double th) { return 2.0 * (1.0 + th / d) / d; });
    default: return DelayKernel::constant(g, 1.0 / d);
  }
}

}  // namespace detail

/// Built-in models by name: "lq_delay", "lq_meanfield", "smooth_nonlinear".
inline BuiltModel make_model(const std::string& name, const ParamMap& params, const SegmentGrid& grid, std::size_t w,
                             const ControlSet& U = default_controls()) {
  const std::size_t n = grid.n();
  const double d = grid.d();
  BuiltModel out;
  out.kernels = KernelSet::zeros(grid);
  if (name == "lq_delay" || name == "lq_meanfield") {
    const double coupling = name == "lq_meanfield" ? param(params, "coupling", 0.1) : 0.0;
    auto p = detail::lq_params(params, coupling);
    if (name == "lq_delay") p.kappa = p.kappa_d = p.kappa_s = p.kappa_l = p.kappa_m = 0.0;
    out.coeffs = std::make_shared<LinearQuadraticModel>(name, n, w, p, U);
    out.kernels.bx = detail::kernel_by_code(grid, param(params, "kernel", 0));
    out.kernels.lx = DelayKernel::constant(grid, 1.0 / d);
    out.kernels.mx = DelayKernel::constant(grid, 1.0 / d);
    if (name == "lq_meanfield") out.kernels.by = DelayKernel::constant(grid, 1.0 / d);
    return out;
  }
  if (name == "smooth_nonlinear") {
    SmoothNonlinearModel::Params p;
    p.a = param(params, "a", p.a), p.a_d = param(params, "a_d", p.a_d), p.kappa = param(params, "kappa", p.kappa);
    p.gamma = param(params, "gamma", p.gamma), p.kappa_d = param(params, "kappa_d", p.kappa_d);
    p.beta = param(params, "beta", p.beta), p.sigma0 = param(params, "sigma0", p.sigma0), p.c = param(params, "c", p.c);
    p.kappa_s = param(params, "kappa_s", p.kappa_s), p.s = param(params, "s", p.s), p.q = param(params, "q", p.q);
    p.q_c = param(params, "q_c", p.q_c), p.kappa_l = param(params, "kappa_l", p.kappa_l), p.r = param(params, "r", p.r);
    p.g = param(params, "g", p.g), p.h = param(params, "h", p.h), p.g_c = param(params, "g_c", p.g_c);
    p.kappa_m = param(params, "kappa_m", p.kappa_m);
    out.coeffs = std::make_shared<SmoothNonlinearModel>(n, w, p, U);
    out.kernels.bx = detail::kernel_by_code(grid, 2);
    out.kernels.by = DelayKernel::constant(grid, 1.0 / d);
    out.kernels.sx = DelayKernel::constant(grid, 1.0 / d);
    out.kernels.lx = DelayKernel::sample(grid, [](double th) { return std::exp(th); });
    out.kernels.mx = DelayKernel::constant(grid, 1.0 / d);
    return out;
  }
  throw ConfigError("unknown model '" + name + "'");
}

inline LiftedCoefficients make_lifted(const std::string& name, const ParamMap& params, const SegmentGrid& grid,
                                      std::size_t w, const ControlSet& U = default_controls()) {
  auto m = make_model(name, params, grid, w, U);
  return LiftedCoefficients(m.coeffs, m.kernels, grid);
}

}  // namespace mfdelay
