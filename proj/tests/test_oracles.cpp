#include <gtest/gtest.h>

#include <cmath>

#include "csmtl/oracles.hpp"
#include "csmtl/quadratic.hpp"
#include "test_support.hpp"

using namespace csmtl;
using namespace csmtl::testing;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

QuadraticProblem scalar_pair() {
  MatrixXd one = MatrixXd::Ones(1, 1);
  VectorXd plus = VectorXd::Ones(1), minus = -VectorXd::Ones(1);
  return QuadraticProblem({one, one}, {plus, minus});
}

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(QuadraticProblem, ScalarPair) {
  QuadraticProblem p = scalar_pair();
  EXPECT_DOUBLE_EQ(p.lipschitz(), 2.0);
  EXPECT_NEAR(p.minimizer(0)(0), 1.0, 1e-15);
  EXPECT_NEAR(p.minimizer(1)(0), -1.0, 1e-15);
  EXPECT_DOUBLE_EQ(p.loss(0, vec({0.0})), 1.0);
  EXPECT_DOUBLE_EQ(p.gradient(1, vec({0.0}))(0), 2.0);
}

TEST(QuadraticProblem, DeterministicAndConflictFree) {
  QuadraticProblem a = make_quadratic_problem(5, 3, 0.7, 9), b = make_quadratic_problem(5, 3, 0.7, 9);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.a(i), b.a(i));
    EXPECT_EQ(a.b(i), b.b(i));
  }
  EXPECT_NE(make_quadratic_problem(5, 3, 0.7, 10).b(0), a.b(0));
  QuadraticProblem aligned = make_quadratic_problem(4, 3, 0.0, 2);
  for (std::size_t i = 1; i < 3; ++i) EXPECT_LT((aligned.minimizer(i) - aligned.minimizer(0)).norm(), 1e-9);
  ProbeOptions opt;
  opt.method = ProbeMethod::gd;
  opt.eta = 1.0 / aligned.lipschitz();
  opt.max_iters = 20000;
  ProbeResult r = convergence_probe(aligned, opt);
  EXPECT_LT((r.theta - aligned.minimizer(0)).norm(), 1e-6);
}

TEST(QuadraticProblem, LipschitzBoundsGradientGrowth) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    QuadraticProblem p = make_quadratic_problem(1 + rng.below(6), 2, 1.0, trial);
    const auto n = static_cast<Eigen::Index>(p.dim());
    VectorXd x = VectorXd::Random(n), y = VectorXd::Random(n);
    for (std::size_t i = 0; i < 2; ++i)
      EXPECT_LE((p.gradient(i, x) - p.gradient(i, y)).norm(), p.lipschitz() * (x - y).norm() * (1 + 1e-12));
  }
}

TEST(QuadraticProblem, RejectsBadInput) {
  EXPECT_THROW(make_quadratic_problem(0, 2, 0.5, 1), ConfigError);
  EXPECT_THROW(make_quadratic_problem(2, 2, 1.5, 1), ConfigError);
  EXPECT_THROW(QuadraticProblem({MatrixXd::Ones(2, 2)}, {VectorXd::Ones(3)}), DimensionError);
}

TEST(PriorityOracle, MirroredTasksTie) {
  QuadraticProblem p = scalar_pair();
  const std::vector<double> w{0.5, 0.5};
  EXPECT_EQ(priority_oracle(p, {0}, 0, 1, w, 1e-3, vec({0.0})), PriorityVerdict::tie);
}

TEST(PriorityOracle, LargerWeightedGradientWins) {
  // Separable: task 0 pulls coordinate 0 hard toward 1, task 1 sits near
  // its optimum there.
  MatrixXd a0 = MatrixXd::Identity(2, 2), a1 = MatrixXd::Identity(2, 2);
  a0(0, 0) = std::sqrt(10.0);
  QuadraticProblem p({a0, a1}, {a0 * vec({1.0, 0.0}), vec({0.1, 0.0})});
  const std::vector<double> w{0.5, 0.5};
  EXPECT_EQ(priority_oracle(p, {0}, 0, 1, w, 1e-3, vec({0.0, 0.0})), PriorityVerdict::first);
  EXPECT_EQ(priority_oracle(p, {0}, 1, 0, w, 1e-3, vec({0.0, 0.0})), PriorityVerdict::second);
}

TEST(PriorityOracle, SingleTaskHoldsPriority) {
  QuadraticProblem p = make_quadratic_problem(3, 1, 0.0, 5);
  EXPECT_EQ(priority_task(p, {0, 2}, {1.0}, 1e-3, vec({0.5, -0.5, 1.0})), 0u);
  EXPECT_EQ(priority_oracle(p, {1}, 0, 0, {1.0}, 1e-3, vec({0, 0, 0})), PriorityVerdict::tie);
}

TEST(PriorityOracle, Antisymmetric) {
  Rng rng(12);
  int decided = 0;
  for (int trial = 0; trial < 500; ++trial) {
    QuadraticProblem p = make_quadratic_problem(1 + rng.below(6), 3, 1.0, 1000 + trial);
    const auto n = static_cast<Eigen::Index>(p.dim());
    VectorXd theta(n);
    for (Eigen::Index i = 0; i < n; ++i) theta(i) = rng.normal();
    const std::vector<std::size_t> subset{rng.below(p.dim())};
    const std::vector<double> w{0.2, 0.3, 0.5};
    const PriorityVerdict ab = priority_oracle(p, subset, 0, 2, w, 1e-3, theta);
    const PriorityVerdict ba = priority_oracle(p, subset, 2, 0, w, 1e-3, theta);
    if (ab == PriorityVerdict::tie) {
      EXPECT_EQ(ba, PriorityVerdict::tie);
    } else {
      EXPECT_NE(ab, ba);
      EXPECT_NE(ba, PriorityVerdict::tie);
      ++decided;
    }
  }
  EXPECT_GT(decided, 400);
}

TEST(PriorityOracle, Errors) {
  QuadraticProblem p = scalar_pair();
  EXPECT_THROW(priority_oracle(p, {}, 0, 1, {0.5, 0.5}, 1e-3, vec({0.0})), ConfigError);
  EXPECT_THROW(priority_oracle(p, {0}, 0, 2, {0.5, 0.5}, 1e-3, vec({0.0})), LookupError);
  EXPECT_THROW(priority_oracle(p, {3}, 0, 1, {0.5, 0.5}, 1e-3, vec({0.0})), DimensionError);
}

TEST(PriorityInequality, IdenticalTasksCoincide) {
  MatrixXd a = MatrixXd::Identity(3, 3) * 1.5;
  VectorXd b = vec({1, -2, 0.5});
  QuadraticProblem p({a, a}, {b, b});
  Theorem1Result r = theorem1_check(p, {0.5, 0.5}, 1e-3, vec({0, 0, 0}));
  EXPECT_NEAR(r.loss_priority, r.loss_sum, 1e-12);
  EXPECT_TRUE(r.holds);
}

TEST(PriorityInequality, ScalarDistinctMinimizers) {
  QuadraticProblem p = scalar_pair();
  for (double theta : {-0.7, 0.2, 0.9, 3.0}) {
    Theorem1Result r = theorem1_check(p, {0.5, 0.5}, 1e-3, vec({theta}));
    EXPECT_TRUE(r.holds) << theta;
    EXPECT_LE(r.loss_priority, r.loss_sum + kTheorem1Tolerance);
  }
}

TEST(PriorityInequality, RandomQuadraticsHoldAlmostAlways) {
  Rng rng(2025);
  int holds = 0;
  const int n = 1000;
  for (int trial = 0; trial < n; ++trial) {
    const std::size_t dim = 1 + rng.below(8), k = 2 + rng.below(3);
    QuadraticProblem p = make_quadratic_problem(dim, k, 1.0, rng.next_u64());
    VectorXd theta(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = rng.normal();
    std::vector<double> w(k);
    double total = 0.0;
    for (double& v : w) total += v = rng.uniform(0.5, 1.5);
    for (double& v : w) v /= total;
    holds += theorem1_check(p, w, 1e-3, theta).holds;
  }
  EXPECT_GE(holds, 990);
}

TEST(ConvergenceProbe, SingleTaskGeometric) {
  MatrixXd a(2, 2);
  a << 1.0, 0.1, 0.0, 0.9;
  QuadraticProblem p({a}, {vec({1.0, -2.0})});
  ProbeOptions opt;
  opt.eta = 1.0 / p.lipschitz();
  opt.max_iters = 200;
  ProbeResult r = convergence_probe(p, opt);
  EXPECT_LT(r.trace.back(), 1e-12);
  EXPECT_FALSE(r.eta_above_bound);
}

TEST(ConvergenceProbe, NullStepIsConstant) {
  QuadraticProblem p = make_quadratic_problem(3, 2, 1.0, 4);
  for (ProbeMethod m : {ProbeMethod::phase2, ProbeMethod::gd}) {
    ProbeOptions opt;
    opt.method = m;
    opt.eta = 0.0;
    opt.max_iters = 50;
    ProbeResult r = convergence_probe(p, opt);
    for (double v : r.trace) EXPECT_EQ(v, r.trace.front());
  }
}

TEST(ConvergenceProbe, WarnsAboveBound) {
  QuadraticProblem p = scalar_pair();
  ProbeOptions opt;
  opt.eta = 1.5;
  opt.max_iters = 5;
  ProbeResult r = convergence_probe(p, opt);
  EXPECT_TRUE(r.eta_above_bound);
  EXPECT_FALSE(r.warning.empty());
}

TEST(ConvergenceProbe, MinPrefixIsRunningMinimum) {
  QuadraticProblem p = make_quadratic_problem(4, 2, 1.0, 8);
  ProbeOptions opt;
  opt.max_iters = 300;
  opt.eta = 1.0 / p.lipschitz();
  ProbeResult r = convergence_probe(p, opt);
  double best = r.trace.front();
  for (std::size_t t = 0; t < r.trace.size(); ++t) {
    best = std::min(best, r.trace[t]);
    EXPECT_EQ(r.min_prefix[t], best);
  }
}

TEST(DecayExponent, RecoversPowerLaws) {
  std::vector<double> inv(10000), inv_sq(10000), flat(10000, 3.0), tiny(10000, 1e-30);
  for (std::size_t t = 1; t <= 10000; ++t) {
    inv[t - 1] = 5.0 / static_cast<double>(t);
    inv_sq[t - 1] = 1.0 / (static_cast<double>(t) * static_cast<double>(t));
  }
  EXPECT_NEAR(fitted_decay_exponent(inv), -1.0, 1e-9);
  EXPECT_NEAR(fitted_decay_exponent(inv_sq), -2.0, 1e-9);
  EXPECT_NEAR(fitted_decay_exponent(flat), 0.0, 1e-12);
  EXPECT_EQ(fitted_decay_exponent(tiny), -std::numeric_limits<double>::infinity());
  EXPECT_THROW(fitted_decay_exponent(std::vector<double>(50, 1.0)), DataError);
}

TEST(ModelPriorities, ChannelsGetAValidTaskAndStatsStayPut) {
  Model m(toy_spec(), 5);
  SyntheticDataset data(toy_data(), 5);
  Batch b = data.batch(0).as_batch();
  const auto before = m.trunk_norm(0).state(1).running_mean.values();
  const auto weights_before = m.trunk_layer(0).weight.values();
  const auto pr = model_channel_priorities(m, b, 0, {0.5, 0.5}, 1e-3);
  ASSERT_EQ(pr.size(), 8u);
  for (std::size_t t : pr) EXPECT_LT(t, 2u);
  EXPECT_EQ(m.trunk_norm(0).state(1).running_mean.values(), before);
  EXPECT_EQ(m.trunk_layer(0).weight.values(), weights_before);
}
