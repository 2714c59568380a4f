#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace mfdelay;
using mfdelay::testing::random_lifted;

namespace {

LiftedVector make(const SegmentGrid& g, double head, std::vector<double> tail) {
  std::vector<Vec> t;
  for (double x : tail) t.push_back(Vec::Constant(1, x));
  return LiftedVector(g, Vec::Constant(1, head), t);
}

}  // namespace

TEST(Inner, ZeroVector) {
  const SegmentGrid g(1, 4, 1.0);
  EXPECT_EQ(inner(LiftedVector(g), LiftedVector(g)), 0.0);
}

TEST(Inner, HeadOnly) {
  const SegmentGrid g(1, 2, 1.0);
  EXPECT_DOUBLE_EQ(inner(make(g, 1, {0, 0}), make(g, 1, {0, 0})), 1.0);
}

TEST(Inner, TailQuadratureOfOnes) {
  const SegmentGrid g(1, 4, 1.0);
  const auto x = make(g, 0, {1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(inner(x, x), 1.0);
}

TEST(Inner, GridMismatchThrows) {
  EXPECT_THROW(inner(LiftedVector(SegmentGrid(1, 4, 1.0)), LiftedVector(SegmentGrid(1, 2, 1.0))), DimensionError);
}

TEST(Shift, ZeroStepsIsIdentity) {
  std::mt19937_64 rng(1);
  const SegmentGrid g(2, 5, 0.5);
  const auto x = random_lifted(g, rng);
  EXPECT_EQ(shift_apply(x, 0).raw(), x.raw());
}

TEST(Shift, SaturatesWithHead) {
  std::mt19937_64 rng(2);
  const SegmentGrid g(2, 4, 1.0);
  const auto x = random_lifted(g, rng);
  for (long k : {4L, 5L, 11L}) {
    const auto y = shift_apply(x, k);
    for (std::size_t j = 0; j < g.m(); ++j) EXPECT_EQ(Vec(y.tail_node(j)), Vec(x.head()));
  }
}

TEST(Shift, HandExample) {
  const SegmentGrid g(1, 2, 1.0);
  const auto y = shift_apply(make(g, 5, {1, 2}), 1);
  EXPECT_EQ(y.raw(), make(g, 5, {2, 5}).raw());
}

TEST(Shift, NegativeStepsThrow) {
  const SegmentGrid g(1, 2, 1.0);
  EXPECT_THROW(shift_apply(LiftedVector(g), -1), ArgumentError);
  EXPECT_THROW(shift_adjoint_apply(LiftedVector(g), -1), ArgumentError);
}

TEST(Shift, SemigroupLawBitExact) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<long> kd(0, 12);
  const SegmentGrid g(2, 7, 0.3);
  for (int c = 0; c < 1000; ++c) {
    const auto x = random_lifted(g, rng);
    const long j = kd(rng), k = kd(rng);
    EXPECT_EQ(shift_apply(shift_apply(x, j), k).raw(), shift_apply(x, j + k).raw());
  }
}

TEST(Shift, PseudoContraction) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<long> kd(0, 20);
  const SegmentGrid g(1, 8, 0.25);
  for (int c = 0; c < 1000; ++c) {
    const auto x = random_lifted(g, rng);
    const long k = kd(rng);
    EXPECT_LE(shift_apply(x, k).norm(), std::exp(0.5 * k * g.delta_theta()) * x.norm() * (1 + 1e-14));
  }
}

TEST(ShiftAdjoint, ZeroStepsIsIdentity) {
  std::mt19937_64 rng(5);
  const SegmentGrid g(1, 4, 1.0);
  const auto y = random_lifted(g, rng);
  EXPECT_EQ(shift_adjoint_apply(y, 0).raw(), y.raw());
}

TEST(ShiftAdjoint, RandomPairings) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<long> kd(0, 6);
  for (std::size_t n : {1u, 3u}) {
    const SegmentGrid g(n, 4, 0.7);
    for (int c = 0; c < 1000; ++c) {
      const auto x = random_lifted(g, rng), y = random_lifted(g, rng);
      const long k = kd(rng);
      const double a = inner(shift_apply(x, k), y), b = inner(x, shift_adjoint_apply(y, k));
      EXPECT_LE(std::abs(a - b), 1e-12 * x.norm() * y.norm());
    }
  }
}

TEST(ShiftAdjoint, HandMatrix) {
  // S = [[1,0,0],[0,0,1],[1,0,0]], Lambda = diag(1, 1/2, 1/2): Lambda^-1 S^T Lambda (0,0,1) = (1/2, 0, 0)
  const SegmentGrid g(1, 2, 1.0);
  const auto y = shift_adjoint_apply(make(g, 0, {0, 1}), 1);
  EXPECT_NEAR(y.raw()[0], 0.5, 1e-15);
  EXPECT_EQ(y.raw()[1], 0.0);
  EXPECT_EQ(y.raw()[2], 0.0);
}

TEST(ShiftMatrix, MatchesApplyAndAdjoint) {
  std::mt19937_64 rng(7);
  const SegmentGrid g(2, 5, 1.0);
  for (long k : {0L, 1L, 3L, 6L}) {
    const Mat S = shift_matrix(g, k);
    const auto x = random_lifted(g, rng);
    EXPECT_LE((S * x.raw() - shift_apply(x, k).raw()).norm(), 1e-14);
    EXPECT_LE((lambda_adjoint(g, S) * x.raw() - shift_adjoint_apply(x, k).raw()).norm(), 1e-12);
  }
}

TEST(EmbedG, Examples) {
  const SegmentGrid g(2, 3, 1.0);
  EXPECT_EQ(embed_G(g, Vec::Zero(2)).raw(), Vec::Zero(static_cast<Eigen::Index>(g.dim())));
  const auto e = embed_G(g, Vec::Unit(2, 0));
  EXPECT_EQ(Vec(e.head()), Vec::Unit(2, 0));
  EXPECT_EQ(e.raw().tail(6), Vec::Zero(6));
  EXPECT_DOUBLE_EQ(e.norm(), 1.0);
  EXPECT_THROW(embed_G(g, Vec::Zero(3)), DimensionError);
}

TEST(EmbedG, IsometryAndPairing) {
  std::mt19937_64 rng(8);
  const SegmentGrid g(3, 4, 0.5);
  for (int c = 0; c < 1000; ++c) {
    const auto x = random_lifted(g, rng);
    const Vec z = random_lifted(SegmentGrid(3, 1, 1.0), rng).raw().head(3);
    EXPECT_NEAR(inner(embed_G(g, z), x), z.dot(x.head()), 1e-12 * (1 + z.norm() * x.norm()));
    EXPECT_NEAR(embed_G(g, z).norm(), z.norm(), 1e-12 * z.norm());
  }
}

TEST(KernelPairing, ZeroKernel) {
  std::mt19937_64 rng(9);
  const SegmentGrid g(2, 6, 1.0);
  EXPECT_EQ(kernel_pairing(g, random_lifted(g, rng), DelayKernel::zero(g)), Vec::Zero(2));
}

TEST(KernelPairing, ConstantsAreExact) {
  const SegmentGrid g(1, 6, 0.3);
  const auto x = make(g, 0, std::vector<double>(6, 2.5));
  EXPECT_NEAR(kernel_pairing(g, x, DelayKernel::constant(g, 4.0))[0], 0.3 * 4.0 * 2.5, 1e-14);
}

TEST(KernelPairing, PointDelayReadsOldestNode) {
  const SegmentGrid g(1, 4, 1.0);
  EXPECT_NEAR(kernel_pairing(g, make(g, 9, {3, 1, 1, 1}), DelayKernel::point_delay(g))[0], 3.0, 1e-15);
}

TEST(KernelPairing, ConsistentWithInnerProduct) {
  std::mt19937_64 rng(10);
  const SegmentGrid g(1, 5, 0.8);
  const auto f = DelayKernel::sample(g, [](double th) { return std::cos(th); });
  for (int c = 0; c < 100; ++c) {
    auto x = random_lifted(g, rng);
    x.head().setZero();
    LiftedVector fv(g);
    for (std::size_t j = 0; j < g.m(); ++j) fv.tail_node(j)[0] = f.values[j];
    EXPECT_NEAR(kernel_pairing(g, x, f)[0], inner(x, fv), 1e-13);
  }
}

TEST(KernelPairing, FirstOrderConvergence) {
  // f = e^theta, segment = sin(theta) on [-1, 0]; reference from a 10x finer grid
  auto value = [](std::size_t m) {
    const SegmentGrid g(1, m, 1.0);
    LiftedVector x(g);
    for (std::size_t j = 0; j < m; ++j) x.tail_node(j)[0] = std::sin(g.node(j));
    return kernel_pairing(g, x, DelayKernel::sample(g, [](double th) { return std::exp(th); }))[0];
  };
  const double fine = value(1280);
  const double e1 = std::abs(value(32) - fine), e2 = std::abs(value(64) - fine), e3 = std::abs(value(128) - fine);
  EXPECT_GT(e1, e2);
  EXPECT_GT(e2, e3);
  EXPECT_NEAR(std::log2(e1 / e2), 1.0, 0.25);
  EXPECT_NEAR(std::log2(e2 / e3), 1.0, 0.25);
}

TEST(LambdaAdjoint, SymmetrizeAndDefect) {
  std::mt19937_64 rng(11);
  const SegmentGrid g(1, 3, 1.0);
  std::normal_distribution<double> nd;
  Mat A(4, 4);
  for (Eigen::Index i = 0; i < 16; ++i) A.data()[i] = nd(rng);
  const Mat S = symmetrize(g, A);
  EXPECT_LE(symmetry_defect(g, S), 1e-12);
  EXPECT_LE((lambda_adjoint(g, lambda_adjoint(g, A)) - A).norm(), 1e-12);
}

TEST(Grid, RejectsBadShapes) {
  EXPECT_THROW(SegmentGrid(0, 4, 1.0), ArgumentError);
  EXPECT_THROW(SegmentGrid(1, 0, 1.0), ArgumentError);
  EXPECT_THROW(SegmentGrid(1, 4, 0.0), ArgumentError);
  EXPECT_THROW(LiftedVector(SegmentGrid(1, 4, 1.0), Vec::Zero(3)), DimensionError);
}
