#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mfdelay/errors.hpp"
#include "mfdelay/model.hpp"
#include "mfdelay/parallel.hpp"
#include "mfdelay/rng.hpp"
#include "mfdelay/segment_space.hpp"
#include "mfdelay/stats.hpp"

namespace mfdelay {

/// Deterministic open-loop control, constant on [t_k, t_{k+1}).
struct ControlPath {
  std::vector<Vec> values;
  double dt = 0.0;

  std::size_t K() const noexcept { return values.size(); }
  double T() const noexcept { return dt * static_cast<double>(values.size()); }

  static ControlPath constant(std::size_t K, double dt, const Vec& u) { return ControlPath{std::vector<Vec>(K, u), dt}; }
  /// `pieces` equal-length pieces; K must be divisible by pieces.size().
  static ControlPath piecewise(std::size_t K, double dt, const std::vector<Vec>& pieces) {
    if (pieces.empty() || K % pieces.size() != 0) throw ConfigError("ControlPath: K not divisible by piece count");
    ControlPath u{std::vector<Vec>(K), dt};
    const std::size_t len = K / pieces.size();
    for (std::size_t k = 0; k < K; ++k) u.values[k] = pieces[k / len];
    return u;
  }
  bool operator==(const ControlPath& o) const {
    if (dt != o.dt || values.size() != o.values.size()) return false;
    for (std::size_t k = 0; k < values.size(); ++k)
      if (values[k].size() != o.values[k].size() || values[k] != o.values[k]) return false;
    return true;
  }
};

/// (x0, segment samples at the m nodes); x0 need not equal the last segment node.
struct InitialSegment {
  Vec x0;
  std::vector<Vec> segment;

  static InitialSegment constant(const SegmentGrid& g, const Vec& x0, const Vec& seg) {
    return InitialSegment{x0, std::vector<Vec>(g.m(), seg)};
  }
  LiftedVector lifted(const SegmentGrid& g) const { return LiftedVector(g, x0, segment); }
};

inline void validate_time_grid(const SegmentGrid& g, const ControlPath& u) {
  if (u.K() == 0) throw ConfigError("control path is empty");
  if (std::abs(u.dt - g.delta_theta()) > 1e-12 * g.delta_theta())
    throw ConfigError("time step must equal the segment spacing d/m");
}

inline void validate_control(const LiftedCoefficients& lc, const ControlPath& u) {
  validate_time_grid(lc.grid(), u);
  const ControlSet& U = lc.coeffs().admissible();
  for (std::size_t k = 0; k < u.K(); ++k)
    if (!U.contains(u.values[k])) throw ConfigError("control value at step " + std::to_string(k) + " outside U_ad");
}

/// Particle histories on {-d, ..., 0, dt, ..., T} plus their per-node averages.
///
/// Index h of a history corresponds to time (h - m) dt; the lifted state at step k
/// is the window [k, k+m] with the head last.
struct Ensemble {
  SegmentGrid grid;
  std::size_t N = 0;
  std::size_t K = 0;
  double dt = 0.0;
  NoiseBank noise;
  ControlPath control;
  std::vector<double> hist;  ///< N x L x n
  std::vector<double> mean;  ///< L x n

  std::size_t L() const noexcept { return grid.m() + K + 1; }
  std::size_t n() const noexcept { return grid.n(); }
  const double* history(std::size_t p) const noexcept { return hist.data() + p * L() * n(); }
  double* history(std::size_t p) noexcept { return hist.data() + p * L() * n(); }
  SegmentRef window(std::size_t p, std::size_t k) const noexcept {
    const double* h = history(p);
    return SegmentRef{h + (k + grid.m()) * n(), h + k * n()};
  }
  SegmentRef mean_window(std::size_t k) const noexcept {
    return SegmentRef{mean.data() + (k + grid.m()) * n(), mean.data() + k * n()};
  }
  double time(std::size_t k) const noexcept { return static_cast<double>(k) * dt; }
};

namespace detail {

/// Averages history node h over particles into mean[h].
inline void average_node(const SegmentGrid& g, std::size_t N, std::size_t L, const std::vector<double>& hist,
                         std::vector<double>& mean, std::size_t h) {
  const std::size_t n = g.n();
  for (std::size_t i = 0; i < n; ++i)
    mean[h * n + i] = pairwise_sum(hist.data() + h * n + i, N, L * n) / static_cast<double>(N);
}

inline void fill_initial(const SegmentGrid& g, const InitialSegment& X0, std::size_t N, std::size_t L,
                         std::vector<double>& hist) {
  const std::size_t n = g.n(), m = g.m();
  if (static_cast<std::size_t>(X0.x0.size()) != n || X0.segment.size() != m)
    throw DimensionError("initial segment shape mismatch");
  for (std::size_t p = 0; p < N; ++p) {
    double* h = hist.data() + p * L * n;
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t i = 0; i < n; ++i) h[j * n + i] = X0.segment[j][static_cast<Eigen::Index>(i)];
    for (std::size_t i = 0; i < n; ++i) h[m * n + i] = X0.x0[static_cast<Eigen::Index>(i)];
  }
}

/// Per-worker buffers for one Euler step of the state.
struct StateWorkspace {
  Args a;
  Vec b;
  Mat s;
  std::vector<double> dw;
  StateWorkspace(std::size_t n, std::size_t w) : a(n), b(Vec::Zero(static_cast<Eigen::Index>(n))), s(Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(w))), dw(w) {}
};

/// out = x + b dt + sigma dW for one particle.
inline void euler_state(const LiftedCoefficients& lc, StateWorkspace& ws, SegmentRef X, SegmentRef Xbar, double t,
                        const Vec& u, double dt, double* out) {
  lc.gather(Slot::Drift, X, Xbar, ws.a);
  lc.drift(ws.a, t, u, ws.b);
  lc.gather(Slot::Diffusion, X, Xbar, ws.a);
  lc.diffusion(ws.a, t, u, ws.s);
  const std::size_t n = lc.n(), w = lc.w();
  for (std::size_t i = 0; i < n; ++i) {
    double v = X.head[i] + ws.b[static_cast<Eigen::Index>(i)] * dt;
    for (std::size_t j = 0; j < w; ++j) v += ws.s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * ws.dw[j];
    out[i] = v;
  }
}

}  // namespace detail

/// Euler-Maruyama method of steps for the synchronized particle system.
inline Ensemble simulate(const LiftedCoefficients& lc, const InitialSegment& X0, const ControlPath& u, std::size_t N,
                         const NoiseBank& noise, const ParallelOptions& par = {}) {
  validate_control(lc, u);
  if (N == 0) throw ArgumentError("simulate: N must be positive");
  if (noise.w() != lc.w()) throw DimensionError("simulate: noise dimension differs from model w");
  Ensemble e;
  e.grid = lc.grid();
  e.N = N;
  e.K = u.K();
  e.dt = u.dt;
  e.noise = noise;
  e.control = u;
  const std::size_t n = e.n(), m = e.grid.m(), L = e.L();
  e.hist.assign(N * L * n, 0.0);
  e.mean.assign(L * n, 0.0);
  detail::fill_initial(e.grid, X0, N, L, e.hist);
  for (std::size_t h = 0; h <= m; ++h) detail::average_node(e.grid, N, L, e.hist, e.mean, h);

  for (std::size_t k = 0; k < e.K; ++k) {
    const double t = e.time(k);
    const SegmentRef Xbar = e.mean_window(k);
    parallel_for(N, par, [&](std::size_t b, std::size_t end, unsigned) {
      detail::StateWorkspace ws(n, lc.w());
      for (std::size_t p = b; p < end; ++p) {
        noise.increment(p, k, ws.dw.data());
        double* out = e.history(p) + (k + m + 1) * n;
        detail::euler_state(lc, ws, e.window(p, k), Xbar, t, u.values[k], e.dt, out);
        for (std::size_t i = 0; i < n; ++i)
          if (!std::isfinite(out[i])) throw DivergenceError("non-finite state in simulate", k + 1);
      }
    });
    detail::average_node(e.grid, N, L, e.hist, e.mean, k + m + 1);
  }
  return e;
}

inline LiftedVector lift_state(const Ensemble& e, std::size_t p, std::size_t k) {
  if (p >= e.N || k > e.K) throw ArgumentError("lift_state: particle or step out of range");
  return to_lifted(e.grid, e.window(p, k));
}

inline LiftedVector lift_mean(const Ensemble& e, std::size_t k) {
  if (k > e.K) throw ArgumentError("lift_mean: step out of range");
  return to_lifted(e.grid, e.mean_window(k));
}

/// Per-particle cost sum_k l dt + m over a history set with its own means.
inline std::vector<double> particle_costs(const LiftedCoefficients& lc, const Ensemble& e, const ControlPath& u,
                                          const ParallelOptions& par = {}) {
  if (!(u.K() == e.K)) throw ConfigError("particle_costs: control length differs from ensemble");
  std::vector<double> cost(e.N, 0.0);
  parallel_for(e.N, par, [&](std::size_t b, std::size_t end, unsigned) {
    Args a(lc.n());
    for (std::size_t p = b; p < end; ++p) {
      double c = 0.0;
      for (std::size_t k = 0; k < e.K; ++k) {
        lc.gather(Slot::Running, e.window(p, k), e.mean_window(k), a);
        c += lc.running(a, e.time(k), u.values[k]) * e.dt;
      }
      lc.gather(Slot::Terminal, e.window(p, e.K), e.mean_window(e.K), a);
      cost[p] = c + lc.terminal(a);
    }
  });
  return cost;
}

struct CostEstimate {
  double J = 0.0;
  double stderr_ = 0.0;
};

inline CostEstimate evaluate_cost(const LiftedCoefficients& lc, const Ensemble& e, const ControlPath& u,
                                  const ParallelOptions& par = {}) {
  if (!(u == e.control)) throw ConfigError("evaluate_cost: ensemble was simulated under a different control");
  const auto c = particle_costs(lc, e, u, par);
  const auto est = mean_estimate(c);
  return CostEstimate{est.mean, est.stderr_};
}

}  // namespace mfdelay
