#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "test_support.hpp"

using namespace mfdelay;
using mfdelay::testing::constant_initial;
using mfdelay::testing::FnModel;
using mfdelay::testing::lift;
using mfdelay::testing::scalar;
using mfdelay::testing::steps;

namespace {

ControlPath zero_control(const SegmentGrid& g, double T) {
  return ControlPath::constant(steps(g, T), g.delta_theta(), scalar(0.0));
}

/// dx = -x(t - d) dt with x = 1 on [-d, 0], solved by hand on [0, 2d].
double delayed_decay(double t, double d) {
  if (t <= d) return 1.0 - t;
  const double s = t - d;
  return (1.0 - d) - s + 0.5 * s * s;
}

}  // namespace

TEST(Simulate, FrozenWithoutDriftOrNoise) {
  const SegmentGrid g(2, 4, 0.25);
  auto f = std::make_shared<FnModel>();
  f->n_ = 2;
  const auto lc = lift(f, g);
  const auto u = zero_control(g, 0.5);
  const auto e = simulate(lc, constant_initial(g, 1.5, -2.0), u, 7, NoiseBank(1, u.dt, 1));
  for (std::size_t p = 0; p < e.N; ++p)
    for (std::size_t k = 0; k <= e.K; ++k) {
      const auto X = lift_state(e, p, k);
      for (std::size_t i = 0; i < 2; ++i) ASSERT_EQ(X.head()[static_cast<Eigen::Index>(i)], 1.5);
    }
}

TEST(Simulate, MartingaleMean) {
  const SegmentGrid g(1, 8, 0.25);
  auto f = std::make_shared<FnModel>();
  const double C = 0.5, T = 0.5, x0 = 0.3;
  f->s = [C](const Point&, Mat& o) { o(0, 0) = C; };
  const auto lc = lift(f, g);
  const auto u = zero_control(g, T);
  const std::size_t N = 100000;
  const auto e = simulate(lc, constant_initial(g, x0, x0), u, N, NoiseBank(7, u.dt, 1));
  EXPECT_LE(std::abs(lift_mean(e, e.K).head()[0] - x0), 3 * C * std::sqrt(T) / std::sqrt(static_cast<double>(N)));
}

TEST(Simulate, DelayedDecayMatchesMethodOfSteps) {
  const double d = 0.25;
  for (std::size_t m : {8u, 32u}) {
    const SegmentGrid g(1, m, d);
    auto f = std::make_shared<FnModel>();
    f->b = [](const Point& p, Vec& o) { o[0] = -p.xt[0]; };
    auto k = KernelSet::zeros(g);
    k.bx = DelayKernel::point_delay(g);
    const auto lc = lift(f, g, k);
    const auto u = zero_control(g, 2 * d);
    const auto e = simulate(lc, constant_initial(g, 1.0, 1.0), u, 1, NoiseBank(1, u.dt, 1));
    double err = 0.0;
    for (std::size_t s = 0; s <= e.K; ++s) err = std::max(err, std::abs(lift_state(e, 0, s).head()[0] - delayed_decay(e.time(s), d)));
    EXPECT_LE(err, 5 * g.delta_theta()) << "m=" << m;
    EXPECT_GT(err, 0.0);
  }
}

TEST(Simulate, EulerWeakOrderOnLinearModel) {
  // the mean of a linear model solves the noise-free equation, so the noise-free run is the weak limit
  const ParamMap par{{"sigma0", 0.0}, {"c", 0.0}, {"s", 0.0}, {"s_add", 0.0}};
  std::vector<double> means;
  std::vector<double> dts;
  for (std::size_t m : {8u, 16u, 32u, 64u}) {
    const SegmentGrid g(1, m, 0.25);
    const auto lc = make_lifted("lq_delay", par, g, 1);
    const auto u = ControlPath::constant(steps(g, 0.5), g.delta_theta(), scalar(1.0));
    const auto e = simulate(lc, constant_initial(g, 1.0, 0.5), u, 2, NoiseBank(1, u.dt, 1));
    means.push_back(lift_mean(e, e.K).head()[0]);
    dts.push_back(g.delta_theta());
  }
  std::vector<std::pair<double, double>> pairs;
  for (std::size_t i = 0; i + 1 < means.size(); ++i) pairs.emplace_back(dts[i], std::abs(means[i] - means[i + 1]));
  EXPECT_GE(fit_loglog_slope(pairs).slope, 0.8);
}

TEST(Simulate, DecouplingIsBitExact) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_delay", {}, g, 2);
  const auto u = ControlPath::piecewise(steps(g, 0.5), g.delta_theta(), {scalar(0.0), scalar(1.0)});
  const auto X0 = constant_initial(g, 1.0, 0.8);
  const std::size_t N = 16;
  const auto all = simulate(lc, X0, u, N, NoiseBank(99, u.dt, 2));
  for (std::size_t p = 0; p < N; ++p) {
    const auto one = simulate(lc, X0, u, 1, NoiseBank(99, u.dt, 2, p));
    ASSERT_EQ(std::memcmp(one.history(0), all.history(p), all.L() * all.n() * sizeof(double)), 0) << "particle " << p;
  }
}

TEST(Simulate, MeanFieldModelCouplesParticles) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_meanfield", {{"coupling", 0.5}}, g, 1);
  const auto u = zero_control(g, 0.5);
  const auto X0 = constant_initial(g, 1.0, 1.0);
  const auto all = simulate(lc, X0, u, 8, NoiseBank(3, u.dt, 1));
  const auto one = simulate(lc, X0, u, 1, NoiseBank(3, u.dt, 1, 0));
  EXPECT_NE(std::memcmp(one.history(0), all.history(0), all.L() * sizeof(double)), 0);
}

TEST(Simulate, SeedDeterminism) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_meanfield", {}, g, 1);
  const auto u = zero_control(g, 0.5);
  const auto X0 = constant_initial(g, 1.0, 1.0);
  const auto a = simulate(lc, X0, u, 500, NoiseBank(5, u.dt, 1));
  const auto b = simulate(lc, X0, u, 500, NoiseBank(5, u.dt, 1));
  const auto c = simulate(lc, X0, u, 500, NoiseBank(6, u.dt, 1));
  EXPECT_EQ(a.hist, b.hist);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_NE(a.hist, c.hist);
}

TEST(Simulate, ThreadCountDoesNotChangeBytes) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_meanfield", {}, g, 1);
  const auto u = zero_control(g, 0.5);
  const auto X0 = constant_initial(g, 1.0, 1.0);
  ParallelOptions four;
  four.threads = 4;
  const auto a = simulate(lc, X0, u, 1000, NoiseBank(5, u.dt, 1));
  const auto b = simulate(lc, X0, u, 1000, NoiseBank(5, u.dt, 1), four);
  EXPECT_EQ(a.hist, b.hist);
  EXPECT_EQ(a.mean, b.mean);
}

TEST(Simulate, MeanPathIsParticleAverage) {
  const SegmentGrid g(2, 4, 0.25);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 2);
  const auto u = zero_control(g, 0.5);
  const auto e = simulate(lc, constant_initial(g, 0.2, 0.1), u, 300, NoiseBank(11, u.dt, 2));
  for (std::size_t k = 0; k <= e.K; ++k) {
    Vec acc = Vec::Zero(static_cast<Eigen::Index>(g.dim()));
    for (std::size_t p = 0; p < e.N; ++p) acc += lift_state(e, p, k).raw();
    EXPECT_LE((acc / 300.0 - lift_mean(e, k).raw()).norm(), 1e-12);
  }
}

TEST(LiftState, InitialAndTransport) {
  const SegmentGrid g(1, 4, 0.25);
  auto f = std::make_shared<FnModel>();
  const auto lc = lift(f, g);
  const auto u = zero_control(g, 0.5);
  InitialSegment X0{scalar(5.0), {scalar(1.0), scalar(2.0), scalar(3.0), scalar(4.0)}};
  const auto e = simulate(lc, X0, u, 2, NoiseBank(1, u.dt, 1));
  EXPECT_EQ(lift_state(e, 1, 0).raw(), X0.lifted(g).raw());
  for (std::size_t k = 0; k < e.K; ++k) EXPECT_EQ(lift_state(e, 0, k + 1).raw(), shift_apply(lift_state(e, 0, k), 1).raw());
  EXPECT_THROW(lift_state(e, 2, 0), ArgumentError);
  EXPECT_THROW(lift_state(e, 0, e.K + 1), ArgumentError);
}

TEST(LiftState, TailReadsHistoryBuffer) {
  const SegmentGrid g(2, 5, 0.25);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 1);
  const auto u = zero_control(g, 0.5);
  const auto e = simulate(lc, constant_initial(g, 0.0, 0.0), u, 3, NoiseBank(2, u.dt, 1));
  for (std::size_t k = 0; k <= e.K; ++k) {
    const auto X = lift_state(e, 2, k);
    const double* h = e.history(2);
    for (std::size_t j = 0; j < g.m(); ++j)
      for (std::size_t i = 0; i < 2; ++i)  // node theta_j = -d + j dtheta sits at time t_k + theta_j
        ASSERT_EQ(X.tail_node(j)[static_cast<Eigen::Index>(i)], h[(k + j) * 2 + i]);
    for (std::size_t i = 0; i < 2; ++i) ASSERT_EQ(X.head()[static_cast<Eigen::Index>(i)], h[(k + g.m()) * 2 + i]);
  }
}

TEST(Simulate, DivergenceCarriesStep) {
  const SegmentGrid g(1, 1, 1.0);
  auto f = std::make_shared<FnModel>();
  f->b = [](const Point&, Vec& o) { o[0] = 1e308; };
  const auto lc = lift(f, g);
  const auto u = zero_control(g, 4.0);
  try {
    simulate(lc, constant_initial(g, 1.0, 1.0), u, 2, NoiseBank(1, u.dt, 1));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 2u);
  }
}

TEST(Simulate, RejectsBadInputs) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  const auto X0 = constant_initial(g, 1.0, 1.0);
  const auto outside = ControlPath::constant(16, g.delta_theta(), scalar(0.5));
  EXPECT_THROW(simulate(lc, X0, outside, 4, NoiseBank(1, g.delta_theta(), 1)), ConfigError);
  const auto wrong_dt = ControlPath::constant(16, 0.5 * g.delta_theta(), scalar(0.0));
  EXPECT_THROW(simulate(lc, X0, wrong_dt, 4, NoiseBank(1, g.delta_theta(), 1)), ConfigError);
  const auto u = zero_control(g, 0.5);
  EXPECT_THROW(simulate(lc, X0, u, 0, NoiseBank(1, u.dt, 1)), ArgumentError);
  EXPECT_THROW(simulate(lc, X0, u, 4, NoiseBank(1, u.dt, 2)), DimensionError);
  EXPECT_THROW(ControlPath::piecewise(10, 0.1, {scalar(0.0), scalar(1.0), scalar(0.0)}), ConfigError);
}

TEST(Cost, ZeroCost) {
  const SegmentGrid g(1, 8, 0.25);
  auto f = std::make_shared<FnModel>();
  f->s = [](const Point&, Mat& o) { o(0, 0) = 1.0; };
  const auto lc = lift(f, g);
  const auto u = zero_control(g, 0.5);
  const auto e = simulate(lc, constant_initial(g, 0.0, 0.0), u, 100, NoiseBank(1, u.dt, 1));
  const auto c = evaluate_cost(lc, e, u);
  EXPECT_EQ(c.J, 0.0);
  EXPECT_EQ(c.stderr_, 0.0);
}

TEST(Cost, UnitRunningCostGivesHorizon) {
  const SegmentGrid g(1, 8, 0.25);
  auto f = std::make_shared<FnModel>();
  f->l = [](const Point&) { return 1.0; };
  f->s = [](const Point&, Mat& o) { o(0, 0) = 1.0; };
  const auto lc = lift(f, g);
  const auto u = zero_control(g, 0.5);
  const auto e = simulate(lc, constant_initial(g, 0.0, 0.0), u, 100, NoiseBank(1, u.dt, 1));
  const auto c = evaluate_cost(lc, e, u);
  EXPECT_NEAR(c.J, 0.5, 1e-14);
  EXPECT_EQ(c.stderr_, 0.0);
}

TEST(Cost, ItoIsometry) {
  const SegmentGrid g(1, 8, 0.25);
  auto f = std::make_shared<FnModel>();
  f->l = [](const Point& p) { return p.x[0] * p.x[0]; };
  f->s = [](const Point&, Mat& o) { o(0, 0) = 1.0; };
  const auto lc = lift(f, g);
  const double T = 0.5, dt = g.delta_theta();
  const auto u = zero_control(g, T);
  const auto e = simulate(lc, constant_initial(g, 0.0, 0.0), u, 100000, NoiseBank(21, u.dt, 1));
  const auto c = evaluate_cost(lc, e, u);
  EXPECT_LE(std::abs(c.J - T * T / 2), 3 * c.stderr_ + dt);
  // left-endpoint sum: dt^2 K (K - 1) / 2
  const double K = static_cast<double>(e.K);
  EXPECT_LE(std::abs(c.J - dt * dt * K * (K - 1) / 2), 3 * c.stderr_);
}

TEST(Cost, RejectsForeignControl) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  const auto u = zero_control(g, 0.5);
  const auto e = simulate(lc, constant_initial(g, 1.0, 1.0), u, 10, NoiseBank(1, u.dt, 1));
  EXPECT_THROW(evaluate_cost(lc, e, ControlPath::constant(e.K, u.dt, scalar(1.0))), ConfigError);
}

TEST(NoiseBank, IncrementStatistics) {
  const NoiseBank nb(123, 0.01, 3);
  std::vector<double> v;
  double buf[3];
  for (std::uint64_t p = 0; p < 20000; ++p) {
    nb.increment(p, 4, buf);
    v.insert(v.end(), buf, buf + 3);
  }
  const auto est = mean_estimate(v);
  EXPECT_LE(std::abs(est.mean), 4 * est.stderr_);
  EXPECT_NEAR(est.stderr_ * est.stderr_ * static_cast<double>(v.size()), 0.01, 0.0005);
}
