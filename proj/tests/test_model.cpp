#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace mfdelay;
using mfdelay::testing::FnModel;
using mfdelay::testing::lift;
using mfdelay::testing::random_lifted;
using mfdelay::testing::scalar;

namespace {

const Vec kU0 = Vec::Constant(1, 0.0);
const Vec kU1 = Vec::Constant(1, 1.0);

}  // namespace

TEST(EvalB, ZeroDrift) {
  const SegmentGrid g(1, 4, 1.0);
  const auto lc = lift(std::make_shared<FnModel>(), g);
  std::mt19937_64 rng(1);
  const auto X = random_lifted(g, rng);
  EXPECT_EQ(lc.eval_B(0.0, X, X, kU0).raw(), Vec::Zero(5));
}

TEST(EvalB, IdentityInFirstSlot) {
  const SegmentGrid g(1, 4, 1.0);
  auto f = std::make_shared<FnModel>();
  f->b = [](const Point& p, Vec& o) { o = p.x; };
  const auto lc = lift(f, g);
  const auto X = embed_G(g, scalar(3.5));
  EXPECT_EQ(lc.eval_B(0.0, X, X, kU0).raw(), X.raw());
}

TEST(EvalB, DelayedArgumentWithConstantKernel) {
  const SegmentGrid g(1, 4, 1.0);
  auto f = std::make_shared<FnModel>();
  f->b = [](const Point& p, Vec& o) { o = p.xt; };
  auto k = KernelSet::zeros(g);
  k.bx = DelayKernel::constant(g, 1.0);
  const auto lc = lift(f, g, k);
  const LiftedVector X(g, scalar(0.0), std::vector<Vec>(4, scalar(1.0)));
  EXPECT_DOUBLE_EQ(lc.eval_B(0.0, X, X, kU0).head()[0], 1.0);
}

TEST(EvalB, TailIsBitwiseZero) {
  const SegmentGrid g(2, 6, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 2);
  std::mt19937_64 rng(2);
  for (int c = 0; c < 50; ++c) {
    const auto X = random_lifted(g, rng), Y = random_lifted(g, rng);
    const auto B = lc.eval_B(0.3, X, Y, kU1);
    for (Eigen::Index i = 2; i < B.raw().size(); ++i) ASSERT_EQ(B.raw()[i], 0.0);
  }
}

TEST(EvalSigma, Examples) {
  const SegmentGrid g(1, 4, 1.0);
  std::mt19937_64 rng(3);
  const auto X = random_lifted(g, rng);
  {
    const auto lc = lift(std::make_shared<FnModel>(), g);
    EXPECT_EQ(lc.eval_Sigma(0.0, X, X, kU0), Mat::Zero(1, 1));
  }
  {
    auto f = std::make_shared<FnModel>();
    f->w_ = 2;
    f->s = [](const Point&, Mat& o) { o << 0.7, -1.3; };
    const auto lc = lift(f, g);
    Mat C(1, 2);
    C << 0.7, -1.3;
    EXPECT_EQ(lc.eval_Sigma(0.1, X, X, kU0), C);
    EXPECT_EQ(lc.eval_Sigma(0.4, random_lifted(g, rng), X, kU1), C);
  }
  {
    auto f = std::make_shared<FnModel>();
    f->U = ControlSet::finite({scalar(0.0), scalar(2.0)});
    f->s = [](const Point& p, Mat& o) { o(0, 0) = p.u[0]; };
    const auto lc = lift(f, g);
    EXPECT_EQ(lc.eval_Sigma(0.0, X, X, scalar(2.0))(0, 0), 2.0);
  }
}

TEST(EvalB, NonFiniteDriftIsReported) {
  const SegmentGrid g(1, 2, 1.0);
  auto f = std::make_shared<FnModel>();
  f->b = [](const Point&, Vec& o) { o[0] = std::nan(""); };
  const auto lc = lift(f, g);
  try {
    lc.eval_B(0.25, LiftedVector(g), LiftedVector(g), kU1);
    FAIL() << "expected EvaluationError";
  } catch (const EvaluationError& e) {
    EXPECT_EQ(e.time(), 0.25);
  }
}

TEST(ApplyBX, ZeroDirection) {
  const SegmentGrid g(1, 6, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 1);
  std::mt19937_64 rng(4);
  const auto X = random_lifted(g, rng);
  EXPECT_EQ(lc.apply_B_X(0.0, X, X, kU0, LiftedVector(g)).raw(), Vec::Zero(7));
}

TEST(ApplyBX, ExactOnLinearModel) {
  const SegmentGrid g(1, 8, 0.25);
  const auto lc = make_lifted("lq_delay", {{"a_d", 0.7}}, g, 1);
  std::mt19937_64 rng(5);
  for (int c = 0; c < 50; ++c) {
    const auto X = random_lifted(g, rng), Y = random_lifted(g, rng), Z = random_lifted(g, rng);
    LiftedVector XZ(g, X.raw() + Z.raw());
    const Vec diff = lc.eval_B(0.1, XZ, Y, kU1).raw() - lc.eval_B(0.1, X, Y, kU1).raw();
    EXPECT_LE((lc.apply_B_X(0.1, X, Y, kU1, Z).raw() - diff).norm(), 1e-12 * (1 + diff.norm()));
  }
}

TEST(ApplyBX, DirectionalFiniteDifference) {
  const SegmentGrid g(2, 6, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 2);
  std::mt19937_64 rng(6);
  const double h = 1e-4;
  for (int c = 0; c < 50; ++c) {
    const auto X = random_lifted(g, rng), Y = random_lifted(g, rng), Z = random_lifted(g, rng);
    const LiftedVector Xp(g, X.raw() + h * Z.raw()), Xm(g, X.raw() - h * Z.raw());
    const Vec fd = (lc.eval_B(0.2, Xp, Y, kU1).raw() - lc.eval_B(0.2, Xm, Y, kU1).raw()) / (2 * h);
    EXPECT_LE((lc.apply_B_X(0.2, X, Y, kU1, Z).raw() - fd).norm(), 1e-6 * (1 + fd.norm()));
    const LiftedVector Yp(g, Y.raw() + h * Z.raw()), Ym(g, Y.raw() - h * Z.raw());
    const Vec fdy = (lc.eval_B(0.2, X, Yp, kU1).raw() - lc.eval_B(0.2, X, Ym, kU1).raw()) / (2 * h);
    EXPECT_LE((lc.apply_B_Y(0.2, X, Y, kU1, Z).raw() - fdy).norm(), 1e-6 * (1 + fdy.norm()));
    for (std::size_t col = 0; col < 2; ++col) {
      const Vec fs = (lc.eval_Sigma(0.2, Xp, Y, kU1).col(static_cast<Eigen::Index>(col)) -
                      lc.eval_Sigma(0.2, Xm, Y, kU1).col(static_cast<Eigen::Index>(col))) /
                     (2 * h);
      EXPECT_LE((Vec(lc.apply_Sigma_X(0.2, X, Y, kU1, Z, col).head()) - fs).norm(), 1e-6 * (1 + fs.norm()));
    }
    const double fl = (lc.eval_L(0.2, Xp, Y, kU1) - lc.eval_L(0.2, Xm, Y, kU1)) / (2 * h);
    EXPECT_NEAR(inner(lc.L_X(0.2, X, Y, kU1), Z), fl, 1e-6 * (1 + std::abs(fl)));
    const double fm = (lc.eval_M(Xp, Y) - lc.eval_M(Xm, Y)) / (2 * h);
    EXPECT_NEAR(inner(lc.M_X(X, Y), Z), fm, 1e-6 * (1 + std::abs(fm)));
  }
}

TEST(ApplyBX, AdjointConsistency) {
  const SegmentGrid g(2, 5, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 2);
  std::mt19937_64 rng(7);
  for (int c = 0; c < 100; ++c) {
    const auto X = random_lifted(g, rng), Y = random_lifted(g, rng), Z = random_lifted(g, rng),
               P = random_lifted(g, rng);
    const double scale = Z.norm() * P.norm();
    EXPECT_LE(std::abs(inner(lc.apply_B_X(0, X, Y, kU1, Z), P) - inner(Z, lc.apply_B_X_adjoint(0, X, Y, kU1, P))),
              1e-12 * scale);
    EXPECT_LE(std::abs(inner(lc.apply_B_Y(0, X, Y, kU1, Z), P) - inner(Z, lc.apply_B_Y_adjoint(0, X, Y, kU1, P))),
              1e-12 * scale);
    for (std::size_t col = 0; col < 2; ++col) {
      EXPECT_LE(std::abs(inner(lc.apply_Sigma_X(0, X, Y, kU1, Z, col), P) -
                         inner(Z, lc.apply_Sigma_X_adjoint(0, X, Y, kU1, P, col))),
                1e-12 * scale);
      EXPECT_LE(std::abs(inner(lc.apply_Sigma_Y(0, X, Y, kU1, Z, col), P) -
                         inner(Z, lc.apply_Sigma_Y_adjoint(0, X, Y, kU1, P, col))),
                1e-12 * scale);
    }
  }
}

TEST(MatrixOfBX, RankAtMostTwoN) {
  const SegmentGrid g(2, 8, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 1);
  std::mt19937_64 rng(8);
  const auto X = random_lifted(g, rng);
  const Mat A = lc.matrix_of_B_X(0.0, X, X, kU1);
  const Eigen::JacobiSVD<Mat> svd(A);
  const auto& sv = svd.singularValues();
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv[i] > 1e-10 * std::max(1.0, sv[0]);
  EXPECT_LE(rank, 4);
  // matrix agrees with apply_B_X
  const auto Z = random_lifted(g, rng);
  EXPECT_LE((A * Z.raw() - lc.apply_B_X(0.0, X, X, kU1, Z).raw()).norm(), 1e-12 * (1 + Z.norm()));
}

TEST(SecondForms, QuadraticFreeDriftGivesZero) {
  const SegmentGrid g(1, 4, 0.5);
  const auto lc = make_lifted("lq_delay", {}, g, 1);
  std::mt19937_64 rng(9);
  const auto X = random_lifted(g, rng), Z1 = random_lifted(g, rng), Z2 = random_lifted(g, rng);
  const auto f = lc.apply_second_forms(0.0, X, X, kU1, Z1, Z2);
  EXPECT_EQ(f.B, Vec::Zero(1));
  EXPECT_EQ(f.Sigma, Mat::Zero(1, 1));
}

TEST(SecondForms, ZeroSecondArgument) {
  const SegmentGrid g(2, 4, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 2);
  std::mt19937_64 rng(10);
  const auto X = random_lifted(g, rng), Z1 = random_lifted(g, rng);
  const auto f = lc.apply_second_forms(0.0, X, X, kU1, Z1, LiftedVector(g));
  EXPECT_EQ(f.B, Vec::Zero(2));
  EXPECT_EQ(f.Sigma, Mat::Zero(2, 2));
  EXPECT_EQ(f.L, 0.0);
}

TEST(SecondForms, SquareRunningCost) {
  const SegmentGrid g(1, 3, 1.0);
  auto f = std::make_shared<FnModel>();
  f->l = [](const Point& p) { return p.x[0] * p.x[0]; };
  f->l_hess = [](const Point&, ScalarHessian& H) { H.xx(0, 0) = 2.0; };
  const auto lc = lift(f, g);
  const auto X = embed_G(g, scalar(0.3));
  const auto Z1 = embed_G(g, scalar(1.5)), Z2 = embed_G(g, scalar(-0.4));
  EXPECT_DOUBLE_EQ(lc.apply_second_forms(0.0, X, X, kU0, Z1, Z2).L, 2 * 1.5 * -0.4);
  Mat expect = Mat::Zero(4, 4);
  expect(0, 0) = 2.0;
  EXPECT_EQ(lc.matrix_of_L_XX(0.0, X, X, kU0), expect);
}

TEST(SecondForms, MatrixReproducesForm) {
  const SegmentGrid g(2, 5, 0.5);
  const auto lc = make_lifted("smooth_nonlinear", {}, g, 1);
  std::mt19937_64 rng(11);
  const auto X = random_lifted(g, rng);
  const Mat A = lc.matrix_of_L_XX(0.0, X, X, kU1);
  const Mat M = lc.matrix_of_M_XX(X, X);
  for (int c = 0; c < 100; ++c) {
    const auto Z1 = random_lifted(g, rng), Z2 = random_lifted(g, rng);
    const double form = lc.apply_second_forms(0.0, X, X, kU1, Z1, Z2).L;
    EXPECT_LE(std::abs(inner(LiftedVector(g, A * Z1.raw()), Z2) - form), 1e-10 * std::max(1.0, std::abs(form)));
    const double mform = lc.apply_M_XX(X, X, Z1, Z2);
    EXPECT_LE(std::abs(inner(LiftedVector(g, M * Z1.raw()), Z2) - mform), 1e-10 * std::max(1.0, std::abs(mform)));
  }
}

TEST(CheckDerivatives, LinearQuadraticModelsAreExact) {
  for (const char* name : {"lq_delay", "lq_meanfield"})
    for (std::size_t n : {1u, 2u}) {
      const SegmentGrid g(n, 4, 0.5);
      const auto m = make_model(name, {}, g, 2);
      const auto rep = check_derivatives(*m.coeffs, 100, 1e-4);
      EXPECT_LE(rep.worst(), 1e-10) << name << " n=" << n;
    }
}

TEST(CheckDerivatives, SmoothModel) {
  for (std::size_t n : {1u, 3u}) {
    const SegmentGrid g(n, 4, 0.5);
    const auto m = make_model("smooth_nonlinear", {}, g, 2);
    const auto rep = check_derivatives(*m.coeffs, 200, 1e-4);
    EXPECT_LE(rep.worst(), 1e-6) << "n=" << n;
    EXPECT_TRUE(rep.flagged(1e-6).empty());
  }
}

TEST(CheckDerivatives, WrongDerivativeIsFlagged) {
  auto f = std::make_shared<FnModel>();
  f->b = [](const Point& p, Vec& o) { o[0] = std::sin(p.x[0]); };
  f->b_jet = [](const Point& p, VectorJet& J) { J.x(0, 0) = std::cos(p.x[0]) + 0.5; };
  const auto rep = check_derivatives(*f, 20, 1e-4);
  EXPECT_GT(rep.max_relative_error.at("b_x"), 0.1);
  const auto bad = rep.flagged(1e-6);
  EXPECT_NE(std::find(bad.begin(), bad.end(), "b_x"), bad.end());
  EXPECT_THROW(check_derivatives(*f, 1, 0.0), ArgumentError);
}

TEST(Models, UnknownNameAndShapeErrors) {
  const SegmentGrid g(1, 4, 0.5);
  EXPECT_THROW(make_lifted("no_such_model", {}, g, 1), ConfigError);
  auto f = std::make_shared<FnModel>();
  f->n_ = 2;
  EXPECT_THROW(lift(f, g), DimensionError);
  auto k = KernelSet::zeros(g);
  k.bx.values.resize(3);
  EXPECT_THROW(lift(std::make_shared<FnModel>(), g, k), DimensionError);
}

TEST(Models, ControlSetMembership) {
  const auto U = default_controls();
  EXPECT_TRUE(U.contains(scalar(1.0)));
  EXPECT_FALSE(U.contains(scalar(0.5)));
}
