#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace mfdelay;
using mfdelay::testing::constant_initial;
using mfdelay::testing::random_lifted;
using mfdelay::testing::scalar;
using mfdelay::testing::steps;

namespace {

VariationBundle bundle(const ParamMap& p, std::size_t m, double v, std::size_t N, const std::string& model = "lq_delay") {
  const SegmentGrid g(1, m, 0.25);
  const auto lc = make_lifted(model, p, g, 1);
  const auto u = ControlPath::constant(steps(g, 0.5), g.delta_theta(), scalar(0.0));
  return simulate_variations(lc, constant_initial(g, 1.0, 1.0), u, SpikeSpec{0.125, 0.125, scalar(v)}, N,
                             NoiseBank(9, g.delta_theta(), 1));
}

const ParamMap kNoNoise{{"c", 0.0}, {"sigma0", 0.0}, {"s", 0.0}, {"s_add", 0.0}};

}  // namespace

TEST(TensorMatrix, ActsAsRankOne) {
  std::mt19937_64 rng(1);
  const SegmentGrid g(2, 4, 0.5);
  for (int c = 0; c < 200; ++c) {
    const auto f = random_lifted(g, rng), h = random_lifted(g, rng), x = random_lifted(g, rng);
    const Mat M = tensor_matrix(f, h);
    EXPECT_LE((M * x.raw() - inner(f, x) * h.raw()).norm(), 1e-12 * (1 + f.norm() * h.norm() * x.norm()));
    const Mat Y = tensor_matrix(f, f);
    EXPECT_NEAR(inner(LiftedVector(g, Y * x.raw()), x), std::pow(inner(f, x), 2), 1e-10 * (1 + std::pow(f.norm() * x.norm(), 2)));
  }
}

TEST(TensorMatrix, GridMismatchThrows) {
  EXPECT_THROW(tensor_matrix(LiftedVector(SegmentGrid(1, 2, 1.0)), LiftedVector(SegmentGrid(1, 3, 1.0))),
               DimensionError);
}

TEST(TraceConjugation, Examples) {
  const SegmentGrid g(1, 1, 1.0);
  Mat M(2, 2);
  M << 3, 1, 1, 2;
  EXPECT_EQ(trace_conjugation(g, {Mat::Identity(2, 2)}, Mat::Zero(2, 2)), Mat::Zero(2, 2));
  EXPECT_EQ(trace_conjugation(g, {Mat::Identity(2, 2)}, M), M);
  Vec u(2), v(2);
  u << 1, 2;
  v << 1, 0;
  Mat expect(2, 2);
  expect << 3, 6, 6, 12;
  EXPECT_LE((trace_conjugation(g, {u * v.transpose()}, M) - expect).norm(), 1e-14);
  EXPECT_EQ(trace_conjugation(g, {}, M), Mat::Zero(2, 2));
  EXPECT_THROW(trace_conjugation(g, {Mat::Identity(3, 3)}, M), DimensionError);
  EXPECT_THROW(trace_conjugation(g, {}, Mat::Zero(3, 3)), DimensionError);
}

TEST(TraceConjugation, SumsOverOperators) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  const SegmentGrid g(1, 3, 0.6);
  Mat A(4, 4), B(4, 4), M(4, 4);
  for (Mat* X : {&A, &B, &M})
    for (Eigen::Index i = 0; i < 16; ++i) X->data()[i] = nd(rng);
  const Mat both = trace_conjugation(g, {A, B}, M);
  EXPECT_LE((both - trace_conjugation(g, {A}, M) - trace_conjugation(g, {B}, M)).norm(), 1e-12);
  EXPECT_LE((trace_conjugation(g, {A}, M) - A * M * lambda_adjoint(g, A)).norm(), 1e-12);
}

TEST(Tensor, DimensionCap) {
  EXPECT_NO_THROW(require_tensor_dim(SegmentGrid(1, 63, 1.0)));
  EXPECT_THROW(require_tensor_dim(SegmentGrid(1, 64, 1.0)), ConfigError);
  EXPECT_THROW(require_tensor_dim(SegmentGrid(4, 16, 1.0)), ConfigError);
  const auto vb = bundle({}, 64, 1.0, 4);
  const SegmentGrid g(1, 64, 0.25);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  EXPECT_THROW(evolve_tensor_mild(lc, vb, 0), ConfigError);
  EXPECT_THROW(tensor_identity_check(lc, vb), ConfigError);
}

TEST(Tensor, NoSpikeMeansZeroPaths) {
  const auto vb = bundle({}, 8, 0.0, 16);
  const auto lc = make_lifted("lq_delay", {}, vb.grid(), 1);
  for (const auto& M : evolve_tensor_mild(lc, vb, 3)) EXPECT_EQ(M.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& M : outer_product_path(vb, 3)) EXPECT_EQ(M.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(tensor_identity_check(lc, vb).max_discrepancy, 0.0);
}

TEST(Tensor, OuterPathMatchesTensorMatrix) {
  const auto vb = bundle({}, 8, 1.0, 8);
  const auto path = outer_product_path(vb, 5);
  ASSERT_EQ(path.size(), vb.K() + 1);
  for (std::size_t k = 0; k <= vb.K(); ++k) {
    const auto y = to_lifted(vb.grid(), vb.Y.window(5, k));
    EXPECT_EQ(path[k], tensor_matrix(y, y));
  }
  EXPECT_THROW(outer_product_path(vb, 8), ArgumentError);
}

TEST(Tensor, MildPathIsSelfAdjoint) {
  const auto vb = bundle({}, 8, 1.0, 8, "lq_meanfield");
  const auto lc = make_lifted("lq_meanfield", {}, vb.grid(), 1);
  for (const auto& M : evolve_tensor_mild(lc, vb, 2)) EXPECT_LE(symmetry_defect(vb.grid(), M), 1e-12 * (1 + M.norm()));
}

TEST(Tensor, NoiseFreeDiscrepancyShrinksWithGrid) {
  // deterministic Y, so the gap between outer product and mild path is pure time discretization
  std::vector<double> gap;
  for (std::size_t m : {8u, 16u, 32u}) {
    const auto vb = bundle(kNoNoise, m, 1.0, 4);
    const auto lc = make_lifted("lq_delay", kNoNoise, vb.grid(), 1);
    const auto rep = tensor_identity_check(lc, vb);
    EXPECT_GT(rep.max_discrepancy, 0.0);
    EXPECT_LE(rep.max_symmetry_defect, 1e-12);
    gap.push_back(rep.max_discrepancy);
  }
  EXPECT_LT(gap[1], gap[0]);
  EXPECT_LT(gap[2], gap[1]);
  EXPECT_NEAR(std::log2(gap[1] / gap[2]), 1.0, 0.3);
}

TEST(Tensor, ReportShapes) {
  const auto vb = bundle({}, 8, 1.0, 300);
  const auto lc = make_lifted("lq_delay", {}, vb.grid(), 1);
  const auto rep = tensor_identity_check(lc, vb);
  EXPECT_EQ(rep.discrepancy.size(), vb.K() + 1);
  EXPECT_EQ(rep.sigma_outer.size(), vb.K() + 1);
  EXPECT_EQ(rep.discrepancy[rep.argmax_step], rep.max_discrepancy);
  EXPECT_EQ(rep.mean_outer_T.rows(), static_cast<Eigen::Index>(vb.grid().dim()));
  ParallelOptions par;
  par.threads = 3;
  EXPECT_EQ(tensor_identity_check(lc, vb, par).discrepancy, rep.discrepancy);
}
