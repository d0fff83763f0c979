#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "csmtl/batchnorm.hpp"
#include "csmtl/gradcheck.hpp"
#include "csmtl/ops.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/tape.hpp"

using namespace csmtl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST(Tensor, RejectsMismatchedValueCount) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
}

TEST(Conv2d, IdentityKernelCopiesInput) {
  Tape tape;
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w(Shape{1, 1, 1, 1}, {1.0});
  Var y = conv2d(tape, tape.leaf(x), tape.leaf(w), 1, 0);
  EXPECT_EQ(tape.value(y).values(), x.values());
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  Rng rng(3);
  Tape tape;
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  Tensor w(Shape{4, 3, 3, 3}, 0.0);
  Var y = conv2d(tape, tape.leaf(x), tape.leaf(w), 1, 1);
  for (double v : tape.value(y).values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, HandCrossCorrelation) {
  Tape tape;
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w(Shape{1, 1, 2, 2}, 1.0);
  Var y = conv2d(tape, tape.leaf(x), tape.leaf(w), 1, 0);
  ASSERT_EQ(tape.value(y).shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(tape.value(y)[0], 10.0);
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  Tape tape;
  Tensor x(Shape{1, 2, 4, 4});
  Tensor w(Shape{1, 3, 3, 3});
  EXPECT_THROW(conv2d(tape, tape.leaf(x), tape.leaf(w)), DimensionError);
}

TEST(Conv2d, NonIntegerExtentIsConfigError) {
  Tape tape;
  Tensor x(Shape{1, 1, 4, 4});
  Tensor w(Shape{1, 1, 3, 3});
  EXPECT_THROW(conv2d(tape, tape.leaf(x), tape.leaf(w), 2, 0), ConfigError);
}

TEST(Conv2d, StridedPaddedGradients) {
  Rng rng(11);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  auto r = gradient_check({&x, &w}, [](Tape& t, const std::vector<Var>& v) {
    return sum(t, mul(t, conv2d(t, v[0], v[1], 2, 1), conv2d(t, v[0], v[1], 2, 1)));
  });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(BatchNorm, ConstantInputCentersToZero) {
  TaskBatchNorm bn(2, 1);
  Tape tape;
  Tensor x(Shape{2, 2, 2, 2}, 3.0);
  Var z = bn.forward(tape, tape.constant(x), 0, BnMode::train);
  for (double v : tape.value(z).values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(BatchNorm, ZeroGammaOutputsBeta) {
  TaskBatchNorm bn(1, 1);
  bn.state(0).gamma[0] = 0.0;
  bn.state(0).beta[0] = 0.7;
  Rng rng(2);
  Tape tape;
  Var z = bn.forward(tape, tape.constant(random_tensor({3, 1, 2, 2}, rng)), 0, BnMode::train);
  for (double v : tape.value(z).values()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(BatchNorm, PlusMinusOneBatch) {
  TaskBatchNorm bn(1, 1);
  Tape tape;
  Var z = bn.forward(tape, tape.constant(Tensor(Shape{2, 1, 1, 1}, {-1.0, 1.0})), 0, BnMode::train);
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(tape.value(z)[0], -s, 1e-15);
  EXPECT_NEAR(tape.value(z)[1], s, 1e-15);
}

TEST(BatchNorm, UnknownTaskIsLookupError) {
  TaskBatchNorm bn(1, 2);
  Tape tape;
  Tensor x(Shape{2, 1, 1, 1});
  EXPECT_THROW(bn.forward(tape, tape.constant(x), 2, BnMode::train), LookupError);
}

TEST(BatchNorm, SingleElementBatchRejectedInTrainMode) {
  TaskBatchNorm bn(1, 1);
  Tape tape;
  Tensor x(Shape{1, 1, 1, 1});
  EXPECT_THROW(bn.forward(tape, tape.constant(x), 0, BnMode::train), DimensionError);
  EXPECT_NO_THROW(bn.forward(tape, tape.constant(x), 0, BnMode::eval));
}

TEST(BatchNorm, RunningStatisticsFollowEma) {
  TaskBatchNorm bn(1, 1);
  Tape tape;
  bn.forward(tape, tape.constant(Tensor(Shape{2, 1, 1, 1}, {1.0, 3.0})), 0, BnMode::train);
  EXPECT_NEAR(bn.state(0).running_mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(bn.state(0).running_var[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-15);
}

TEST(BatchNorm, TrainModeOutputMoments) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    TaskBatchNorm bn(3, 1);
    for (std::size_t c = 0; c < 3; ++c) {
      bn.state(0).gamma[c] = rng.uniform(-2.0, 2.0);
      bn.state(0).beta[c] = rng.uniform(-1.0, 1.0);
    }
    Tensor x = random_tensor({4, 3, 3, 3}, rng, -0.05, 0.05);
    Tape tape;
    const Tensor& z = tape.value(bn.forward(tape, tape.constant(x), 0, BnMode::train));
    for (std::size_t c = 0; c < 3; ++c) {
      double mx = 0, vx = 0, mz = 0, vz = 0;
      const std::size_t count = 4 * 9;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t j = 0; j < 9; ++j) {
          mx += x[(b * 3 + c) * 9 + j];
          mz += z[(b * 3 + c) * 9 + j];
        }
      mx /= count;
      mz /= count;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t j = 0; j < 9; ++j) {
          vx += std::pow(x[(b * 3 + c) * 9 + j] - mx, 2);
          vz += std::pow(z[(b * 3 + c) * 9 + j] - mz, 2);
        }
      vx /= count;
      vz /= count;
      const double g = bn.state(0).gamma[c];
      EXPECT_NEAR(mz, bn.state(0).beta[c], 1e-6);
      EXPECT_NEAR(std::sqrt(vz), std::abs(g) * std::sqrt(vx / (vx + 1e-5)), 1e-6);
    }
  }
}

TEST(Losses, MseExamples) {
  Tape tape;
  Tensor y(Shape{3}, {1, 2, 3});
  EXPECT_EQ(tape.value(mse_loss(tape, tape.constant(y), y)).item(), 0.0);
  Tensor p(Shape{1}, {0.0});
  EXPECT_DOUBLE_EQ(tape.value(mse_loss(tape, tape.constant(p), Tensor(Shape{1}, {2.0}))).item(), 4.0);
}

TEST(Losses, MseShapeMismatch) {
  Tape tape;
  EXPECT_THROW(mse_loss(tape, tape.constant(Tensor(Shape{2})), Tensor(Shape{3})), DimensionError);
}

TEST(Losses, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 7u}) {
    Tape tape;
    std::vector<int> labels{0, static_cast<int>(c - 1), 1};
    Var l = cross_entropy_loss(tape, tape.constant(Tensor(Shape{3, c}, 0.25)), labels);
    EXPECT_NEAR(tape.value(l).item(), std::log(static_cast<double>(c)), 1e-14);
  }
}

TEST(Losses, LabelOutOfRange) {
  Tape tape;
  std::vector<int> labels{0, 3};
  EXPECT_THROW(cross_entropy_loss(tape, tape.constant(Tensor(Shape{2, 3})), labels), LabelError);
  std::vector<int> negative{-1, 0};
  EXPECT_THROW(cross_entropy_loss(tape, tape.constant(Tensor(Shape{2, 3})), negative), LabelError);
}

TEST(Losses, MissingPayloadIsDataError) {
  Tape tape;
  Var p = tape.constant(Tensor(Shape{1, 2}));
  EXPECT_THROW(compute_loss(tape, p, Target{}, LossKind::mse), DataError);
  EXPECT_THROW(compute_loss(tape, p, Target{}, LossKind::cross_entropy), DataError);
}

TEST(Backward, SquareAtThree) {
  Tensor theta(Shape{1}, {3.0});
  Tape tape;
  Var t = tape.leaf(theta);
  tape.backward(mul(tape, t, t));
  EXPECT_DOUBLE_EQ(theta.grad()[0], 6.0);
}

TEST(Backward, ChainRuleByHand) {
  Tensor theta(Shape{1}, {1.0});
  Tape tape;
  Var t = tape.leaf(theta);
  Var one = tape.constant(Tensor::scalar(1.0));
  Var inner = add(tape, scale(tape, t, 2.0), one);
  tape.backward(mul(tape, inner, inner));
  EXPECT_DOUBLE_EQ(theta.grad()[0], 12.0);
}

TEST(Backward, DisconnectedParameterGetsNothing) {
  Tensor a(Shape{1}, {2.0}), b(Shape{1}, {5.0});
  Tape tape;
  Var va = tape.leaf(a);
  Var vb = tape.leaf(b);
  Var unused = mul(tape, vb, vb);
  (void)unused;
  tape.backward(mul(tape, va, va));
  EXPECT_EQ(b.grad()[0], 0.0);
  EXPECT_EQ(tape.last_backward_visits(), 1u);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor a(Shape{2}, {1.0, 2.0});
  Tape tape;
  Var va = tape.leaf(a);
  EXPECT_THROW(tape.backward(va), InvariantError);
}

TEST(Backward, LeafGradientsAccumulate) {
  Tensor theta(Shape{1}, {3.0});
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    Var t = tape.leaf(theta);
    tape.backward(mul(tape, t, t));
  }
  EXPECT_DOUBLE_EQ(theta.grad()[0], 12.0);
}

TEST(Backward, NonFiniteForwardIsNumericError) {
  Tensor a(Shape{1}, {1000.0});
  Tape tape;
  EXPECT_THROW(exp(tape, tape.leaf(a)), NumericError);
}

TEST(Backward, Linearity) {
  Rng rng(5);
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  auto l1 = [](Tape& t, Var vx, Var vw) { return sum(t, relu(t, conv2d(t, vx, vw, 1, 1))); };
  auto l2 = [](Tape& t, Var vx, Var vw) {
    Var y = conv2d(t, vx, vw, 1, 0);
    return sum(t, mul(t, y, y));
  };
  auto grad_of = [&](auto f) {
    w.zero_grad();
    Tape t;
    t.backward(f(t, t.constant(x), t.leaf(w)));
    return w.grad();
  };
  const auto g1 = grad_of(l1);
  const auto g2 = grad_of(l2);
  const double a = 0.7, b = -1.3;
  const auto g = grad_of([&](Tape& t, Var vx, Var vw) {
    return add(t, scale(t, l1(t, vx, vw), a), scale(t, l2(t, vx, vw), b));
  });
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], a * g1[i] + b * g2[i], 1e-12);
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    TaskBatchNorm bn(4, 1);
    Tape t;
    Var y = bn.forward(t, conv2d(t, t.constant(x), t.leaf(w), 1, 1), 0, BnMode::train);
    t.backward(sum(t, mul(t, y, relu(t, y))));
    std::vector<double> out = t.value(y).values();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, EveryOperatorOnSmallCases) {
  Rng rng(1234);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({2, 2, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor bias = random_tensor({3}, rng);
    TaskBatchNorm bn(3, 1);
    Tensor r = random_tensor({2, 3, 4, 4}, rng);
    auto res = gradient_check({&x, &w, &bias, &bn.state(0).gamma, &bn.state(0).beta},
                              [&](Tape& t, const std::vector<Var>& v) {
                                Var y = conv2d(t, v[0], v[1], 1, 1);
                                y = bn.forward(t, y, 0, BnMode::train, false);
                                y = add_channel_bias(t, y, v[2]);
                                return sum(t, mul(t, y, t.constant(r)));
                              });
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;

    Tensor logits = random_tensor({3, 4, 2, 2}, rng);
    std::vector<int> labels(12);
    for (int& l : labels) l = static_cast<int>(rng.below(4));
    auto ce = gradient_check({&logits}, [&](Tape& t, const std::vector<Var>& v) {
      return cross_entropy_loss(t, v[0], labels);
    });
    EXPECT_LT(ce.max_rel_error, 1e-4) << ce.worst;

    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    Tensor target = random_tensor({3, 2}, rng);
    auto mm = gradient_check({&a, &b}, [&](Tape& t, const std::vector<Var>& v) {
      return mse_loss(t, exp(t, scale(t, matmul(t, v[0], v[1]), 0.5)), target);
    });
    EXPECT_LT(mm.max_rel_error, 1e-4) << mm.worst;
  }
}
