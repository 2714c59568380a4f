#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace mfdelay;
using mfdelay::testing::constant_initial;
using mfdelay::testing::scalar;
using mfdelay::testing::steps;

namespace {

struct Case {
  SegmentGrid g;
  LiftedCoefficients lc;
  ControlPath u;
  VariationBundle vb;
  AdjointPath adj;
};

Case make_case(const std::string& model, const ParamMap& p, double v, std::size_t N, std::uint64_t seed = 4) {
  const SegmentGrid g(1, 8, 0.25);
  auto lc = make_lifted(model, p, g, 1);
  const auto u = ControlPath::constant(steps(g, 0.5), g.delta_theta(), scalar(0.0));
  auto vb = simulate_variations(lc, constant_initial(g, 1.0, 1.0), u, SpikeSpec{0.125, 0.125, scalar(v)}, N,
                                NoiseBank(seed, g.delta_theta(), 1));
  auto adj = solve_first_order(lc, vb.X, u).path;
  return Case{g, std::move(lc), u, std::move(vb), std::move(adj)};
}

HamiltonianContext hand_context(const SegmentGrid& g) {
  HamiltonianContext c;
  c.t = 0.0;
  c.X = LiftedVector(g, scalar(1.0), std::vector<Vec>(g.m(), scalar(1.0)));
  c.Xbar = c.X;
  c.u = scalar(0.0);
  c.p = embed_G(g, scalar(2.0));
  c.q = {embed_G(g, scalar(0.5))};
  return c;
}

}  // namespace

TEST(Hamiltonian, HandValues) {
  // lq_delay defaults at head = tail = 1: b = v/2, sigma = (1 + v)/2, l = 1/2 + v^2/10
  const SegmentGrid g(1, 4, 1.0);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  const auto c = hand_context(g);
  EXPECT_NEAR(hamiltonian(lc, c, scalar(0.0)), -0.25, 1e-14);
  EXPECT_NEAR(hamiltonian(lc, c, scalar(1.0)), 0.9, 1e-14);
}

TEST(Hamiltonian, ResidualUsesSecondOrderCorrection) {
  const SegmentGrid g(1, 4, 1.0);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  auto c = hand_context(g);
  EXPECT_THROW(smp_residual(lc, c, scalar(1.0)), ConfigError);
  Mat P = Mat::Zero(5, 5);
  P(0, 0) = -2.0;
  c.P = P;
  EXPECT_NEAR(smp_residual(lc, c, scalar(1.0)), -0.9, 1e-14);
  EXPECT_NEAR(smp_residual(lc, c, scalar(0.0)), 0.0, 1e-15);
  c.q.clear();
  EXPECT_THROW(hamiltonian(lc, c, scalar(1.0)), DimensionError);
}

TEST(Duality, ZeroSpikeGivesExactZeros) {
  const auto cs = make_case("lq_meanfield", {}, 0.0, 300);
  const auto d = duality_check_first_order(cs.lc, cs.vb, cs.adj);
  EXPECT_EQ(d.y.lhs.mean, 0.0);
  EXPECT_EQ(d.y.rhs.mean, 0.0);
  EXPECT_EQ(d.z.lhs.mean, 0.0);
  EXPECT_EQ(d.z.rhs.mean, 0.0);
  EXPECT_TRUE(d.y.verdict.pass);
}

TEST(Duality, FirstOrderHoldsInMean) {
  for (const auto& [model, p] : std::vector<std::pair<std::string, ParamMap>>{{"lq_delay", {}}, {"lq_meanfield", {}}}) {
    const auto cs = make_case(model, p, 1.0, 4000);
    const auto d = duality_check_first_order(cs.lc, cs.vb, cs.adj);
    EXPECT_TRUE(d.y.verdict.pass) << model << " Y: " << d.y.verdict.estimate << " vs " << d.y.verdict.tolerance;
    EXPECT_TRUE(d.z.verdict.pass) << model << " Z: " << d.z.verdict.estimate << " vs " << d.z.verdict.tolerance;
    EXPECT_GT(std::abs(d.y.lhs.mean), 3 * d.y.lhs.stderr_) << model;
  }
}

TEST(Duality, LinearTerminalFunctional) {
  // M = h x, no running cost: E[p_T . Y_T] = -h E[Y_T head], with no noise in the adjoint
  const ParamMap p{{"q", 0.0}, {"r", 0.0}, {"g", 0.0}, {"h", 2.0}};
  const auto cs = make_case("lq_delay", p, 1.0, 500);
  const auto d = duality_check_first_order(cs.lc, cs.vb, cs.adj);
  const std::size_t K = cs.vb.K();
  std::vector<double> yh(cs.vb.N());
  for (std::size_t i = 0; i < yh.size(); ++i) yh[i] = -2.0 * cs.vb.Y.window(i, K).head[0];
  EXPECT_NEAR(d.y.lhs.mean, mean_estimate(yh).mean, 1e-12);
  EXPECT_TRUE(d.y.verdict.pass);
}

TEST(Duality, RejectsForeignAdjoint) {
  const auto a = make_case("lq_delay", {}, 1.0, 100, 4);
  const auto b = make_case("lq_delay", {}, 1.0, 100, 5);
  EXPECT_THROW(duality_check_first_order(a.lc, a.vb, b.adj), ConfigError);
}

TEST(SecondOrderDuality, TrivialCostGivesZero) {
  const ParamMap p{{"q", 0.0}, {"r", 0.0}, {"g", 0.0}, {"h", 1.0}};
  const auto cs = make_case("lq_delay", p, 1.0, 200);
  const auto P = solve_second_order(cs.lc, cs.vb.X, cs.u);
  const auto d = duality_check_second_order(cs.lc, cs.vb, P);
  EXPECT_EQ(d.full.lhs.mean, 0.0);
  EXPECT_EQ(d.full.rhs.mean, 0.0);
  EXPECT_TRUE(d.full.verdict.pass);
  SecondOrderAdjointPath bad = P;
  bad.P.pop_back();
  EXPECT_THROW(duality_check_second_order(cs.lc, cs.vb, bad), ConfigError);
}

TEST(SecondOrderDuality, ResidualIsHigherOrder) {
  // the identity holds up to o(eps): the residual shrinks faster than the pairing itself
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  const auto u = ControlPath::constant(steps(g, 0.5), g.delta_theta(), scalar(0.0));
  std::vector<double> rel;
  for (double eps : {0.25, 0.0625}) {
    const auto vb = simulate_variations(lc, constant_initial(g, 1.0, 1.0), u, SpikeSpec{0.125, eps, scalar(1.0)}, 4000,
                                        NoiseBank(4, g.delta_theta(), 1));
    const auto adj = solve_first_order(lc, vb.X, u).path;
    const auto P = solve_second_order(lc, vb.X, u, &adj);
    const auto d = duality_check_second_order(lc, vb, P, &adj);
    EXPECT_LT(d.full.lhs.mean, 0.0);
    rel.push_back(std::abs(d.full.verdict.estimate) / std::abs(d.full.lhs.mean));
  }
  EXPECT_LT(rel[1], rel[0]);
}

TEST(DualFamily, HoldsInMean) {
  const auto cs = make_case("lq_meanfield", {}, 1.0, 4000);
  const auto D = static_cast<Eigen::Index>(cs.g.dim());
  for (std::size_t s : {6u, 12u, 16u}) {
    const auto fam = solve_dual_family(cs.lc, cs.vb.X, cs.u, s, Mat::Identity(D, D));
    const auto reps = dual_family_check(cs.lc, cs.vb, fam);
    ASSERT_EQ(reps.size(), 1u);
    EXPECT_TRUE(reps[0].verdict.pass) << "s=" << s << ": " << reps[0].verdict.estimate << " vs "
                                      << reps[0].verdict.tolerance;
  }
}

TEST(DualFamily, BeforeSpikeIsZero) {
  const auto cs = make_case("lq_delay", {}, 1.0, 100);
  const auto D = static_cast<Eigen::Index>(cs.g.dim());
  const auto fam = solve_dual_family(cs.lc, cs.vb.X, cs.u, 2, Mat::Identity(D, D));
  const auto reps = dual_family_check(cs.lc, cs.vb, fam);
  EXPECT_EQ(reps[0].lhs.mean, 0.0);
  EXPECT_EQ(reps[0].rhs.mean, 0.0);
}

TEST(CostExpansion, NoSpikeGivesZeros) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_meanfield", {}, g, 1);
  const auto u = ControlPath::constant(steps(g, 0.5), g.delta_theta(), scalar(0.0));
  const auto rep = cost_expansion_check(lc, constant_initial(g, 1.0, 1.0), u, 0.125, scalar(0.0), {0.0625, 0.125}, 100, 3);
  ASSERT_EQ(rep.rows.size(), 2u);
  for (const auto& r : rep.rows) {
    EXPECT_EQ(r.dJ.mean, 0.0);
    EXPECT_EQ(r.rhs.mean, 0.0);
    EXPECT_TRUE(r.pass);
  }
  EXPECT_TRUE(rep.all_within);
}

TEST(SmpTable, CoversEveryStepAndControl) {
  const auto cs = make_case("lq_delay", {}, 1.0, 200);
  const auto P = solve_second_order(cs.lc, cs.vb.X, cs.u, &cs.adj);
  const auto tab = smp_table(cs.lc, cs.vb.X, cs.adj, P);
  ASSERT_EQ(tab.size(), 2 * cs.vb.K());
  for (const auto& cell : tab)
    if (cell.v == cs.u.values[cell.step]) EXPECT_EQ(cell.residual.mean, 0.0);
  // the table agrees with the context-based residual
  const std::size_t k = 5;
  std::vector<double> r(cs.vb.N());
  for (std::size_t i = 0; i < r.size(); ++i)
    r[i] = smp_residual(cs.lc, make_context(cs.vb.X, cs.adj, &P, i, k), scalar(1.0));
  EXPECT_NEAR(tab[2 * k + 1].residual.mean, mean_estimate(r).mean, 1e-12);
}
