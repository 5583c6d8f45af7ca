#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "msagcn/gradcheck.hpp"
#include "msagcn/ops.hpp"

using namespace msagcn;

namespace {

// Central differences of a scalar function of one tensor, used as an oracle
// independent of grad_check.
template <typename F>
Tensor numeric_grad(Tensor& x, F&& f, double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double rel_error(const Tensor& a, const Tensor& n) {
  double diff = 0, scale = 1e-8;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - n[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(n[i])});
  }
  return diff / scale;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Tensor, ShapeAndStorageAgree) {
  Tensor t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.rank(), 4u);
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({1, 1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor({3, 0}), ShapeError);
}

TEST(Tensor, ParameterGradHasValueShape) {
  Parameter p("w", Tensor({3, 2}, 1.0));
  EXPECT_EQ(p.grad.shape(), p.value.shape());
  Parameter frozen("f", Tensor({2}), false);
  frozen.accumulate(Tensor({2}, 5.0));
  EXPECT_EQ(frozen.grad[0], 0.0);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  Tensor m = Tensor::normal({3, 3}, rng);
  EXPECT_EQ(ops::matmul(Tensor::identity(3), m), m);
}

TEST(Matmul, HandExample) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  EXPECT_EQ(ops::matmul(a, b), Tensor({2, 1}, {3, 7}));
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor a = Tensor::normal({4, 5}, rng), b = Tensor::normal({5, 3}, rng);
  const Tensor r = Tensor::normal({4, 3}, rng);
  auto f = [&] { return dot(r, ops::matmul(a, b)); };
  const auto g = ops::matmul_backward(a, b, r);
  EXPECT_LT(rel_error(g.da, numeric_grad(a, f)), 1e-6);
  EXPECT_LT(rel_error(g.db, numeric_grad(b, f)), 1e-6);
}

TEST(TemporalConv, UnitKernelIsIdentity) {
  Rng rng(3);
  const Tensor x = Tensor::normal({2, 3, 7, 4}, rng);
  Tensor w({3, 3, 1});
  for (std::size_t c = 0; c < 3; ++c) w(c, c, 0) = 1.0;
  EXPECT_EQ(ops::temporal_conv(x, w, nullptr, 1, 0), x);
}

TEST(TemporalConv, HandExample) {
  const Tensor x({1, 1, 4, 1}, {1, 2, 3, 4});
  const Tensor w({1, 1, 3}, {1, 1, 1});
  EXPECT_EQ(ops::temporal_conv(x, w, nullptr, 1, 1), Tensor({1, 1, 4, 1}, {3, 6, 9, 7}));
}

TEST(TemporalConv, OutputLengthFormula) {
  for (std::size_t T : {5u, 6u, 11u})
    for (std::size_t k : {1u, 3u, 5u})
      for (std::size_t s : {1u, 2u}) {
        const std::size_t pad = (k - 1) / 2;
        const Tensor y = ops::temporal_conv(Tensor({1, 1, T, 2}), Tensor({1, 1, k}), nullptr, s, pad);
        EXPECT_EQ(y.dim(2), (T + 2 * pad - k) / s + 1);
      }
}

TEST(TemporalConv, TooShortSequence) {
  EXPECT_THROW(ops::temporal_conv(Tensor({1, 1, 2, 1}), Tensor({1, 1, 5}), nullptr, 1, 0), SequenceTooShortError);
}

TEST(TemporalConv, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  for (std::size_t stride : {1u, 2u}) {
    Tensor x = Tensor::normal({2, 3, 9, 2}, rng), w = Tensor::normal({4, 3, 5}, rng), bias = Tensor::normal({4}, rng);
    const Tensor y0 = ops::temporal_conv(x, w, &bias, stride, 2);
    const Tensor r = Tensor::normal(y0.shape(), rng);
    auto f = [&] { return dot(r, ops::temporal_conv(x, w, &bias, stride, 2)); };
    const auto g = ops::temporal_conv_backward(x, w, stride, 2, r);
    EXPECT_LT(rel_error(g.dx, numeric_grad(x, f)), 1e-5);
    EXPECT_LT(rel_error(g.dw, numeric_grad(w, f)), 1e-5);
    EXPECT_LT(rel_error(g.dbias, numeric_grad(bias, f)), 1e-5);
  }
}

TEST(BatchNorm, ConstantInputNormalizesToZero) {
  const Tensor x({2, 3, 4, 5}, 7.5);
  const auto r = ops::batch_norm(x, Tensor({3}, 1.0), Tensor({3}), Tensor({3}), Tensor({3}, 1.0), Mode::train);
  for (double v : r.y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, BetaShiftsChannelMean) {
  Rng rng(5);
  const Tensor x = Tensor::normal({4, 2, 5, 3}, rng, 3.0);
  const auto r = ops::batch_norm(x, Tensor({2}, 1.0), Tensor({2}, 5.0), Tensor({2}), Tensor({2}, 1.0), Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t v = 0; v < 3; ++v) m += r.y(b, c, t, v);
    EXPECT_NEAR(m / 60.0, 5.0, 1e-9);
  }
}

TEST(BatchNorm, GradientMatchesFiniteDifferencesInBothModes) {
  Rng rng(6);
  for (Mode mode : {Mode::eval, Mode::train}) {
    Tensor x = Tensor::normal({2, 3, 4, 2}, rng), gamma = Tensor::normal({3}, rng), beta = Tensor::normal({3}, rng);
    const Tensor rm = Tensor::normal({3}, rng), rv = Tensor::uniform({3}, 0.5, 2.0, rng);
    const Tensor r = Tensor::normal(x.shape(), rng);
    auto f = [&] { return dot(r, ops::batch_norm(x, gamma, beta, rm, rv, mode).y); };
    const auto fw = ops::batch_norm(x, gamma, beta, rm, rv, mode);
    const auto g = ops::batch_norm_backward(fw.xhat, fw.stats, gamma, mode, r);
    EXPECT_LT(rel_error(g.dx, numeric_grad(x, f)), 1e-5);
    EXPECT_LT(rel_error(g.dgamma, numeric_grad(gamma, f)), 1e-5);
    EXPECT_LT(rel_error(g.dbeta, numeric_grad(beta, f)), 1e-5);
  }
}

TEST(Softmax, SymmetricInputIsUniform) {
  const Tensor y = ops::softmax(Tensor({1, 2}), 1);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, EverySliceIsADistribution) {
  Rng rng(7);
  const Tensor x = Tensor::normal({3, 4, 5, 2}, rng, 10.0);
  for (std::size_t axis = 0; axis < 4; ++axis) {
    const Tensor y = ops::softmax(x, axis);
    const Tensor s = ops::global_avg_pool(y, std::vector<std::size_t>{axis});
    for (double v : y.data()) EXPECT_GE(v, 0.0);
    for (double v : s.data()) EXPECT_NEAR(v * static_cast<double>(x.dim(axis)), 1.0, 1e-9);
  }
  EXPECT_THROW(ops::softmax(x, 4), AxisError);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  Tensor x = Tensor::normal({2, 3, 4}, rng);
  const Tensor r = Tensor::normal(x.shape(), rng);
  auto f = [&] { return dot(r, ops::softmax(x, 1)); };
  EXPECT_LT(rel_error(ops::softmax_backward(ops::softmax(x, 1), r, 1), numeric_grad(x, f)), 1e-6);
}

TEST(Elementwise, ReluAndSigmoid) {
  const Tensor x({4}, {-2.0, -0.5, 0.5, 3.0});
  EXPECT_EQ(ops::relu(x), Tensor({4}, {0, 0, 0.5, 3.0}));
  EXPECT_DOUBLE_EQ(ops::sigmoid(0.0), 0.5);
  EXPECT_NEAR(ops::sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_TRUE(ops::sigmoid(Tensor({2}, {-800.0, 800.0})).all_finite());
}

TEST(Elementwise, SigmoidGradient) {
  Rng rng(9);
  Tensor x = Tensor::normal({6}, rng);
  const Tensor r = Tensor::normal({6}, rng);
  auto f = [&] { return dot(r, ops::sigmoid(x)); };
  EXPECT_LT(rel_error(ops::sigmoid_backward(ops::sigmoid(x), r), numeric_grad(x, f)), 1e-7);
}

TEST(Pooling, ConstantAveragesToConstant) {
  const Tensor x({2, 3, 4, 5}, -1.25);
  for (const std::vector<std::size_t>& axes : {std::vector<std::size_t>{0}, {1, 3}, {2, 3}, {0, 1, 2, 3}}) {
    const Tensor y = ops::global_avg_pool(x, axes);
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, -1.25);
  }
  EXPECT_THROW(ops::global_avg_pool(x, std::vector<std::size_t>{4}), AxisError);
}

TEST(Pooling, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  Tensor x = Tensor::normal({2, 3, 4, 2}, rng);
  const std::vector<std::size_t> axes{1, 3};
  const Tensor r = Tensor::normal(ops::global_avg_pool(x, axes).shape(), rng);
  auto f = [&] { return dot(r, ops::global_avg_pool(x, axes)); };
  EXPECT_LT(rel_error(ops::global_avg_pool_backward(x.shape(), axes, r), numeric_grad(x, f)), 1e-7);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor x = Tensor::normal({3, 4}, rng), w = Tensor::normal({4, 2}, rng), b = Tensor::normal({2}, rng);
  const Tensor r = Tensor::normal({3, 2}, rng);
  auto f = [&] { return dot(r, ops::linear(x, w, b)); };
  const auto g = ops::linear_backward(x, w, r);
  EXPECT_LT(rel_error(g.dx, numeric_grad(x, f)), 1e-7);
  EXPECT_LT(rel_error(g.dw, numeric_grad(w, f)), 1e-7);
  EXPECT_LT(rel_error(g.dbias, numeric_grad(b, f)), 1e-7);
}

TEST(Linearity, AddAndBroadcastMulGradientsAreLinear) {
  Rng rng(12);
  const Tensor x = Tensor::normal({2, 3, 4, 2}, rng), w = Tensor::normal({2, 3}, rng);
  const Tensor df = Tensor::normal(x.shape(), rng), dg = Tensor::normal(x.shape(), rng);
  const double a = 0.7, b = -1.9;
  Tensor combo = df;
  combo *= a;
  Tensor scaled_g = dg;
  scaled_g *= b;
  combo += scaled_g;
  const auto gc = ops::broadcast_mul_backward(x, w, combo);
  const auto gf = ops::broadcast_mul_backward(x, w, df), gg = ops::broadcast_mul_backward(x, w, dg);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(gc.dx[i], a * gf.dx[i] + b * gg.dx[i], 1e-10);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(gc.dw[i], a * gf.dw[i] + b * gg.dw[i], 1e-10);
  const Tensor sum = ops::add(x, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(sum[i], 2 * x[i]);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(13);
  const Tensor x = Tensor::normal({2, 3, 6, 2}, rng), w = Tensor::normal({4, 3, 3}, rng);
  const Tensor zero({2, 4, 6, 2});
  const auto g = ops::temporal_conv_backward(x, w, 1, 1, zero);
  for (const Tensor* t : {&g.dx, &g.dw, &g.dbias})
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, SquareAtThree) {
  Parameter theta("theta", Tensor({1}, {3.0}));
  std::vector<Parameter*> params{&theta};
  const auto r = grad_check([&] { return theta.value[0] * theta.value[0]; },
                            [&] { theta.grad[0] += 2 * theta.value[0]; }, params);
  EXPECT_LT(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.worst_parameter, "theta");
}

TEST(GradCheck, DetectsAWrongGradient) {
  Parameter theta("theta", Tensor({2}, {1.0, -2.0}));
  std::vector<Parameter*> params{&theta};
  const auto r = grad_check([&] { return theta.value[0] * theta.value[1]; },
                            [&] {
                              theta.grad[0] += theta.value[1];
                              theta.grad[1] += 1.1 * theta.value[0];
                            },
                            params);
  EXPECT_GT(r.max_rel_error, 1e-2);
}

TEST(GradCheck, NonFiniteLossIsReported) {
  Parameter theta("theta", Tensor({1}, {0.0}));
  std::vector<Parameter*> params{&theta};
  EXPECT_THROW(grad_check([&] { return std::log(theta.value[0]); }, [] {}, params), NumericError);
}

TEST(GradCheck, ReluAtItsKinkUsesTheRecordedSide) {
  // relu(θ) at θ = 1e-13: any usable step crosses zero, but the probes stay on
  // the active piece, so the slope is 1.
  Parameter theta("theta", Tensor({1}, {1e-13}));
  std::vector<Parameter*> params{&theta};
  const auto r = grad_check([&] { return ops::relu(theta.value)[0]; }, [&] { theta.grad[0] += 1.0; }, params);
  EXPECT_LT(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.branches, 1u);
  const auto wrong = grad_check([&] { return ops::relu(theta.value)[0]; }, [] {}, params);
  EXPECT_GT(wrong.max_rel_error, 0.5);
}

TEST(BranchLog, ReplayPinsDecisions) {
  const Tensor x({3}, {1.0, -2.0, 3.0});
  BranchLog log;
  EXPECT_EQ(ops::relu(x), Tensor({3}, {1.0, 0.0, 3.0}));
  log.replay();
  EXPECT_EQ(ops::relu(Tensor({3}, {-1.0, 2.0, 3.0})), Tensor({3}, {-1.0, 0.0, 3.0}));
  EXPECT_TRUE(log.replay_complete());
  EXPECT_THROW(ops::relu(x), Error);
}

TEST(BranchLog, InactiveOutsideScope) {
  { BranchLog log; }
  EXPECT_FALSE(BranchLog::enabled());
  EXPECT_EQ(BranchLog::branch(7), 7u);
}
