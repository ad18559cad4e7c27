#include "eqprop/tensor.hpp"

#include <gtest/gtest.h>

#include "eqprop/rng.hpp"
#include "oracle_utils.hpp"

using eqprop::PoolIndices;
using eqprop::Rng;
using eqprop::Shape;
using Tensor = eqprop::Tensor<double>;

namespace {

Tensor t3(Shape s, std::vector<double> v) { return Tensor::from_data(std::move(s), std::move(v)); }

TEST(Conv2d, IdentityOneByOneKernel) {
  Tensor w = t3({1, 1, 1, 1}, {1.0});
  Tensor b = t3({1}, {0.0});
  Tensor x = t3({1, 1, 1}, {2.0});
  Tensor y = eqprop::conv2d(w, x, b, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 2.0);
}

TEST(Conv2d, SumOfWindow) {
  Tensor w(Shape{1, 1, 2, 2}, 1.0);
  Tensor b = t3({1}, {0.0});
  Tensor x(Shape{1, 2, 2}, 1.0);
  Tensor y = eqprop::conv2d(w, x, b, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 4.0);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(17);
  Tensor w = oracle::random_tensor<double>({2, 3, 3, 3}, rng);
  Tensor b = oracle::random_tensor<double>({2}, rng);
  Tensor x = oracle::random_tensor<double>({3, 5, 5}, rng);
  Tensor got = eqprop::conv2d(w, x, b, 1);
  Tensor want = oracle::conv2d_ref(w, x, &b, 1);
  EXPECT_LE(oracle::max_rel_error(got, want), 1e-12);
}

TEST(Conv2d, BatchedMatchesOracle) {
  Rng rng(18);
  Tensor w = oracle::random_tensor<double>({4, 2, 3, 3}, rng);
  Tensor b = oracle::random_tensor<double>({4}, rng);
  Tensor x = oracle::random_tensor<double>({3, 2, 6, 6}, rng);
  Tensor got = eqprop::conv2d(w, x, b, 1);
  Tensor want = oracle::conv2d_ref(w, x, &b, 1);
  ASSERT_EQ(got.shape(), (Shape{3, 4, 6, 6}));
  EXPECT_LE(oracle::max_rel_error(got, want), 1e-12);
}

TEST(Conv2d, RejectsChannelMismatchNamingShapes) {
  Tensor w(Shape{2, 3, 3, 3}, 0.1);
  Tensor x(Shape{2, 5, 5}, 0.1);
  try {
    eqprop::conv2d_nobias(w, x, 1);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3,3,3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(2,5,5)"), std::string::npos) << msg;
  }
}

TEST(Conv2d, RejectsNegativePadding) {
  Tensor w(Shape{1, 1, 1, 1}, 1.0);
  Tensor x(Shape{1, 2, 2}, 1.0);
  EXPECT_THROW(eqprop::conv2d_nobias(w, x, -1), std::invalid_argument);
}

TEST(Conv2dTranspose, ScalarAdjoint) {
  Tensor w = t3({1, 1, 1, 1}, {3.0});
  Tensor y = t3({1, 1, 1}, {5.0});
  Tensor x = eqprop::conv2d_transpose(w, y, 0);
  ASSERT_EQ(x.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(x[0], 15.0);
}

TEST(Conv2dTranspose, ZeroMapsToZero) {
  Tensor w(Shape{2, 3, 3, 3}, 0.5);
  Tensor y(Shape{2, 4, 4});
  Tensor x = eqprop::conv2d_transpose(w, y, 1);
  ASSERT_EQ(x.shape(), (Shape{3, 4, 4}));
  EXPECT_DOUBLE_EQ(eqprop::max_abs(x), 0.0);
}

// gdot(y, w*x) == gdot(transpose(w, y), x) for random shape-compatible inputs.
TEST(Conv2dTranspose, AdjointIdentity) {
  Rng rng(42);
  struct Case {
    std::size_t co, ci, f, h, w;
    long p;
  };
  const Case cases[] = {{2, 3, 3, 5, 5, 1}, {1, 1, 2, 4, 6, 0}, {4, 2, 3, 8, 8, 2},
                        {3, 3, 1, 3, 3, 0}, {2, 4, 5, 7, 9, 2}};
  for (const auto& c : cases) {
    Tensor w = oracle::random_tensor<double>({c.co, c.ci, c.f, c.f}, rng);
    Tensor x = oracle::random_tensor<double>({c.ci, c.h, c.w}, rng);
    Tensor y_fwd = eqprop::conv2d_nobias(w, x, c.p);
    Tensor y = oracle::random_tensor<double>(y_fwd.shape(), rng);
    const double lhs = eqprop::gdot(y, y_fwd);
    const double rhs = eqprop::gdot(eqprop::conv2d_transpose(w, y, c.p), x);
    EXPECT_NEAR(lhs, rhs, 1e-10) << "co=" << c.co << " f=" << c.f << " p=" << c.p;
  }
}

TEST(Conv2dTranspose, BatchedAdjointIdentity) {
  Rng rng(43);
  Tensor w = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
  Tensor x = oracle::random_tensor<double>({4, 2, 6, 6}, rng);
  Tensor y_fwd = eqprop::conv2d_nobias(w, x, 1);
  Tensor y = oracle::random_tensor<double>(y_fwd.shape(), rng);
  EXPECT_NEAR(eqprop::gdot(y, y_fwd), eqprop::gdot(eqprop::conv2d_transpose(w, y, 1), x),
              1e-10);
}

TEST(Conv2dWeightGrad, ZeroUpstream) {
  Tensor x(Shape{2, 4, 4}, 0.7);
  Tensor up(Shape{3, 4, 4});
  auto [wg, bg] = eqprop::conv2d_weight_grad(up, x, 1, 3);
  EXPECT_DOUBLE_EQ(eqprop::max_abs(wg), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::max_abs(bg), 0.0);
}

TEST(Conv2dWeightGrad, OneByOneCase) {
  Tensor x = t3({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor up = t3({1, 2, 2}, {0.5, 1.0, -1.0, 2.0});
  auto [wg, bg] = eqprop::conv2d_weight_grad(up, x, 0, 1);
  ASSERT_EQ(wg.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(wg[0], 0.5 * 1 + 1.0 * 2 - 1.0 * 3 + 2.0 * 4);
  EXPECT_DOUBLE_EQ(bg[0], 0.5 + 1.0 - 1.0 + 2.0);
}

// d/dw gdot(up, conv2d(w,x)) checked entrywise by central differences.
TEST(Conv2dWeightGrad, MatchesFiniteDifferences) {
  Rng rng(7);
  Tensor w = oracle::random_tensor<double>({2, 3, 3, 3}, rng);
  Tensor b = oracle::random_tensor<double>({2}, rng);
  Tensor x = oracle::random_tensor<double>({3, 5, 5}, rng);
  Tensor up = oracle::random_tensor<double>({2, 5, 5}, rng);
  auto [wg, bg] = eqprop::conv2d_weight_grad(up, x, 1, 3);

  auto f_w = [&](const Tensor& wt) { return eqprop::gdot(up, eqprop::conv2d(wt, x, b, 1)); };
  Tensor wg_fd = oracle::central_diff<double>(f_w, w, 1e-5);
  EXPECT_LE(oracle::max_rel_error(wg, wg_fd), 1e-6);

  auto f_b = [&](const Tensor& bt) { return eqprop::gdot(up, eqprop::conv2d(w, x, bt, 1)); };
  Tensor bg_fd = oracle::central_diff<double>(f_b, b, 1e-5);
  EXPECT_LE(oracle::max_rel_error(bg, bg_fd), 1e-6);
}

TEST(Conv2dWeightGrad, BatchSumsAreDeterministic) {
  Rng rng(8);
  Tensor x = oracle::random_tensor<double>({5, 2, 4, 4}, rng);
  Tensor up = oracle::random_tensor<double>({5, 3, 4, 4}, rng);
  auto [wg1, bg1] = eqprop::conv2d_weight_grad(up, x, 1, 3);
  auto [wg2, bg2] = eqprop::conv2d_weight_grad(up, x, 1, 3);
  for (std::size_t i = 0; i < wg1.numel(); ++i) EXPECT_EQ(wg1[i], wg2[i]);
  for (std::size_t i = 0; i < bg1.numel(); ++i) EXPECT_EQ(bg1[i], bg2[i]);
}

TEST(Maxpool, SmallCase) {
  Tensor x = t3({1, 2, 2}, {1, 2, 3, 4});
  auto [y, ind] = eqprop::maxpool(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 4.0);
  EXPECT_EQ(ind.row[0], 1);
  EXPECT_EQ(ind.col[0], 1);
}

TEST(Maxpool, TieBreaksToFirstInRowMajorOrder) {
  Tensor x(Shape{2, 4, 4}, 3.25);
  auto [y, ind] = eqprop::maxpool(x, 2);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    EXPECT_DOUBLE_EQ(y[i], 3.25);
    EXPECT_EQ(ind.row[i], 0);
    EXPECT_EQ(ind.col[i], 0);
  }
}

TEST(Maxpool, MatchesWindowScanOracle) {
  Rng rng(11);
  Tensor x = oracle::random_tensor<double>({1, 8, 8}, rng);
  auto [y, ind] = eqprop::maxpool(x, 2);
  Tensor want = oracle::maxpool_ref(x, 2);
  EXPECT_LE(oracle::max_rel_error(y, want), 0.0);
  // indices actually address the maxima
  Tensor gathered = eqprop::pool_gather(x, ind, 2);
  EXPECT_LE(oracle::max_rel_error(gathered, want), 0.0);
}

TEST(Maxpool, RejectsNonDivisibleExtents) {
  Tensor x(Shape{1, 5, 4}, 0.0);
  EXPECT_THROW(eqprop::maxpool(x, 2), std::invalid_argument);
}

TEST(Unpool, ZeroIsZero) {
  Rng rng(12);
  Tensor x = oracle::random_tensor<double>({2, 4, 4}, rng);
  auto [y, ind] = eqprop::maxpool(x, 2);
  Tensor z(y.shape());
  Tensor u = eqprop::unpool(z, ind, 2);
  EXPECT_DOUBLE_EQ(eqprop::max_abs(u), 0.0);
}

TEST(Unpool, ProjectsOntoArgmaxPositions) {
  Rng rng(13);
  Tensor x = oracle::random_tensor<double>({2, 6, 6}, rng, 0.0, 1.0);
  auto [y, ind] = eqprop::maxpool(x, 3);
  Tensor u = eqprop::unpool(y, ind, 3);
  // u equals x at argmax positions and zero elsewhere
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < u.numel(); ++i)
    if (u[i] != 0.0) ++nonzero;
  EXPECT_EQ(nonzero, y.numel());
  auto [y2, ind2] = eqprop::maxpool(u, 3);
  EXPECT_LE(oracle::max_rel_error(y2, y), 0.0);
}

// maxpool(unpool(y, ind, F)).values == y for any nonnegative y.
TEST(Unpool, PoolUnpoolRoundTripPropertyForNonnegativeValues) {
  Rng rng(14);
  for (int rep = 0; rep < 25; ++rep) {
    const std::size_t C = 1 + rng.uniform_index(3);
    const std::size_t F = 2 + rng.uniform_index(2);
    const std::size_t Ho = 1 + rng.uniform_index(4);
    const std::size_t Wo = 1 + rng.uniform_index(4);
    Tensor probe = oracle::random_tensor<double>({C, Ho * F, Wo * F}, rng);
    auto [_, ind] = eqprop::maxpool(probe, F);
    Tensor y = oracle::random_tensor<double>({C, Ho, Wo}, rng, 0.0, 5.0);
    auto [y2, ind2] = eqprop::maxpool(eqprop::unpool(y, ind, F), F);
    EXPECT_LE(oracle::max_rel_error(y2, y), 0.0);
  }
}

TEST(Unpool, RejectsShapeMismatch) {
  Tensor x(Shape{1, 4, 4}, 1.0);
  auto [y, ind] = eqprop::maxpool(x, 2);
  Tensor wrong(Shape{2, 2, 2}, 1.0);
  EXPECT_THROW(eqprop::unpool(wrong, ind, 2), std::invalid_argument);
  EXPECT_THROW(eqprop::unpool(y, ind, 4), std::invalid_argument);
}

TEST(Flatten, RowMajorOrder) {
  Tensor x = t3({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor f = eqprop::flatten(x);
  ASSERT_EQ(f.shape(), (Shape{8}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(f[i], double(i + 1));
}

TEST(Flatten, UnflattenInverse) {
  Rng rng(15);
  Tensor x = oracle::random_tensor<double>({3, 4, 5}, rng);
  Tensor back = eqprop::unflatten(eqprop::flatten(x), {3, 4, 5});
  EXPECT_LE(oracle::max_rel_error(back, x), 0.0);

  Tensor xb = oracle::random_tensor<double>({2, 3, 4, 5}, rng);
  Tensor fb = eqprop::flatten(xb);
  ASSERT_EQ(fb.shape(), (Shape{2, 60}));
  Tensor backb = eqprop::unflatten(fb, {3, 4, 5});
  EXPECT_LE(oracle::max_rel_error(backb, xb), 0.0);
}

TEST(Flatten, ZerosStayZeros) {
  Tensor x(Shape{2, 3, 3});
  EXPECT_DOUBLE_EQ(eqprop::max_abs(eqprop::flatten(x)), 0.0);
}

TEST(Flatten, UnflattenRejectsExtentMismatch) {
  Tensor f(Shape{7}, 1.0);
  EXPECT_THROW(eqprop::unflatten(f, {2, 2, 2}), std::invalid_argument);
}

TEST(Gdot, Basics) {
  Tensor a(Shape{2, 2}, 1.0);
  Tensor z(Shape{2, 2});
  EXPECT_DOUBLE_EQ(eqprop::gdot(a, z), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::gdot(a, a), 4.0);
  Tensor b(Shape{3}, 1.0);
  EXPECT_THROW(eqprop::gdot(a, b), std::invalid_argument);
}

TEST(Gdot, MatchesLoopOracle) {
  Rng rng(16);
  Tensor a = oracle::random_tensor<double>({3, 7, 5}, rng);
  Tensor b = oracle::random_tensor<double>({3, 7, 5}, rng);
  EXPECT_NEAR(eqprop::gdot(a, b), oracle::gdot_ref(a, b), 1e-12);
}

TEST(ActivationFn, KnownValues) {
  EXPECT_DOUBLE_EQ(eqprop::activation_scalar(0.0), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_scalar(2.0), 1.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_scalar(1.0), 0.5);
  EXPECT_DOUBLE_EQ(eqprop::activation_scalar(-3.0), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_scalar(10.0), 1.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_deriv_scalar(-3.0), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_deriv_scalar(10.0), 0.0);
  // derivative is 0 at the kinks by definition
  EXPECT_DOUBLE_EQ(eqprop::activation_deriv_scalar(0.0), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_deriv_scalar(2.0), 0.0);
  EXPECT_DOUBLE_EQ(eqprop::activation_deriv_scalar(1.0), 0.5);
}

TEST(ActivationFn, NondecreasingBoundedAndDerivMatchesSlopeAwayFromKinks) {
  Rng rng(19);
  double prev_x = -5.0, prev_y = eqprop::activation_scalar(prev_x);
  for (int i = 1; i <= 1000; ++i) {
    const double x = -5.0 + 10.0 * i / 1000.0;
    const double y = eqprop::activation_scalar(x);
    EXPECT_GE(y, prev_y);
    EXPECT_GE(y, 0.0);
    EXPECT_LE(y, 1.0);
    prev_y = y;
  }
  for (int rep = 0; rep < 200; ++rep) {
    const double x = rng.uniform(-4.0, 6.0);
    if (std::abs(x) < 1e-3 || std::abs(x - 2.0) < 1e-3) continue;
    const double h = 1e-6;
    const double fd =
        (eqprop::activation_scalar(x + h) - eqprop::activation_scalar(x - h)) / (2 * h);
    EXPECT_NEAR(fd, eqprop::activation_deriv_scalar(x), 1e-9) << "x=" << x;
  }
}

TEST(TensorType, FromDataValidatesLength) {
  EXPECT_THROW(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST(TensorType, RequireFiniteNamesOffender) {
  Tensor x(Shape{2, 2}, 1.0);
  x[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(x.require_finite("test"), std::runtime_error);
}

}  // namespace
