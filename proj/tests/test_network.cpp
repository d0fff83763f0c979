#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "csmtl/network.hpp"
#include "csmtl/synthetic.hpp"
#include "test_support.hpp"

using namespace csmtl;
using namespace csmtl::testing;

namespace {

std::size_t count_suffix(const std::vector<NamedParam>& ps, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& p : ps)
    if (p.name.size() >= suffix.size() && p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ++n;
  return n;
}

ModelSpec random_spec(Rng& rng) {
  ModelSpec spec;
  const std::size_t layers = 1 + rng.below(3);
  std::size_t prev = 1 + rng.below(3);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t out = 1 + rng.below(5);
    spec.trunk.push_back(ConvSpec{prev, out, 1 + 2 * rng.below(2), 1, 1});
    prev = out;
  }
  const std::size_t k = 1 + rng.below(4);
  for (std::size_t t = 0; t < k; ++t) {
    std::vector<ConvSpec> head;
    std::size_t hp = prev;
    for (std::size_t l = 0; l < rng.below(3); ++l) {
      const std::size_t out = 1 + rng.below(3);
      head.push_back(ConvSpec{hp, out, 1, 1, 0});
      hp = out;
    }
    spec.heads.push_back(head);
    spec.tasks.push_back({"task" + std::to_string(t), LossKind::mse, 1.0});
  }
  return spec;
}

}  // namespace

TEST(BuildModel, SingleTaskHasOneNormStatePerConv) {
  ModelSpec spec = toy_spec();
  spec.tasks.resize(1);
  spec.heads.resize(1);
  Model m(spec, 1);
  for (std::size_t l = 0; l < m.num_trunk_layers(); ++l) EXPECT_EQ(m.trunk_norm(l).num_tasks(), 1u);
  ParameterPartition p = m.partition();
  ASSERT_EQ(p.per_task.size(), 1u);
}

TEST(BuildModel, SameSeedSameParameters) {
  Model a(toy_spec(), 42), b(toy_spec(), 42), c(toy_spec(), 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].tensor->values(), pb[i].tensor->values());
    differs = differs || pa[i].tensor->values() != pc[i].tensor->values();
  }
  EXPECT_TRUE(differs);
}

TEST(BuildModel, InitialStateAndBound) {
  Model m(toy_spec(), 3);
  const double bound = std::sqrt(1.0 / (3.0 * 9.0));
  for (double v : m.trunk_layer(0).weight.values()) EXPECT_LE(std::abs(v), bound);
  const BatchNormState& st = m.trunk_norm(1).state(1);
  for (std::size_t c = 0; c < st.channels(); ++c) {
    EXPECT_EQ(st.gamma[c], 1.0);
    EXPECT_EQ(st.beta[c], 0.0);
    EXPECT_EQ(st.running_mean[c], 0.0);
    EXPECT_EQ(st.running_var[c], 1.0);
  }
}

TEST(BuildModel, InconsistentChannelsIsConfigError) {
  ModelSpec spec = toy_spec();
  spec.trunk[1].in_channels = 5;
  EXPECT_THROW(Model(spec, 0), ConfigError);
  ModelSpec heads = toy_spec();
  heads.heads[0][0].in_channels = 2;
  EXPECT_THROW(Model(heads, 0), ConfigError);
  ModelSpec none = toy_spec();
  none.tasks.clear();
  none.heads.clear();
  EXPECT_THROW(Model(none, 0), ConfigError);
}

TEST(Partition, TwoLayerCounts) {
  ModelSpec spec = toy_spec(3, {8, 16});
  Model m(spec, 0);
  ParameterPartition p = m.partition();
  EXPECT_EQ(count_suffix(p.shared, ".weight"), 2u);
  for (const auto& task : p.per_task) {
    EXPECT_EQ(count_suffix(task, ".gamma"), 2u);
    EXPECT_EQ(count_suffix(task, ".beta"), 2u);
    EXPECT_EQ(task.size(), 4u + 2u);  // norm params plus head weight and bias
  }
}

TEST(Partition, NoHeadsLeavesOnlyNormParameters) {
  ModelSpec spec = toy_spec();
  spec.heads = {{}, {}};
  Model m(spec, 0);
  ParameterPartition p = m.partition();
  for (const auto& task : p.per_task) {
    EXPECT_EQ(task.size(), 4u);
    EXPECT_EQ(count_suffix(task, ".gamma") + count_suffix(task, ".beta"), 4u);
  }
}

TEST(Partition, DisjointAndCompleteOnRandomSpecs) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Model m(random_spec(rng), static_cast<std::uint64_t>(trial));
    ParameterPartition p = m.partition();
    std::set<const Tensor*> seen;
    std::set<std::string> names;
    for (const auto& np : p.shared) {
      EXPECT_TRUE(seen.insert(np.tensor).second);
      names.insert(np.name);
    }
    for (const auto& task : p.per_task)
      for (const auto& np : task) {
        EXPECT_TRUE(seen.insert(np.tensor).second) << np.name;
        names.insert(np.name);
      }
    EXPECT_EQ(seen.size(), p.total());
    EXPECT_EQ(names.size(), p.total());
    EXPECT_EQ(m.parameters().size(), p.total());
  }
}

TEST(PerTaskGradients, ScalarToyModel) {
  Model m = scalar_model(0.0);
  Batch b = scalar_batch({1.0, -1.0});
  TaskGradients g1 = per_task_gradients(m, b, 0, 1.0);
  TaskGradients g2 = per_task_gradients(m, b, 1, 1.0);
  const auto& v1 = g1.shared.at("trunk.0.weight");
  const auto& v2 = g2.shared.at("trunk.0.weight");
  EXPECT_DOUBLE_EQ(g1.loss, 1.0);
  EXPECT_DOUBLE_EQ(v1[0], -2.0);
  EXPECT_DOUBLE_EQ(v2[0], 2.0);
  EXPECT_DOUBLE_EQ(dot(v1, v2), -4.0);
  EXPECT_LT(dot(v1, v2), 0.0);
}

TEST(PerTaskGradients, ZeroWeightGivesZeroGradients) {
  Model m(toy_spec(), 5);
  SyntheticDataset data(toy_data(), 1);
  TaskGradients g = per_task_gradients(m, data.batch(0).as_batch(), 1, 0.0);
  EXPECT_GT(g.loss, 0.0);
  for (const auto& [name, v] : g.shared.entries)
    for (double x : v) EXPECT_EQ(x, 0.0) << name;
  for (const auto& [name, v] : g.own.entries)
    for (double x : v) EXPECT_EQ(x, 0.0) << name;
}

TEST(PerTaskGradients, MissingTargetIsDataError) {
  Model m(toy_spec(), 5);
  SyntheticDataset data(toy_data(), 1);
  Batch b = data.batch(0).as_batch();
  b.targets.resize(1);
  EXPECT_THROW(per_task_gradients(m, b, 1, 1.0), DataError);
  b.targets = {Target{}, Target{}};
  EXPECT_THROW(per_task_gradients(m, b, 0, 1.0), DataError);
}

TEST(PerTaskGradients, NonFiniteLossIsNumericError) {
  Model m = scalar_model(std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(per_task_gradients(m, scalar_batch({1.0, -1.0}), 0, 1.0), NumericError);
}

TEST(PerTaskGradients, TaskIsolation) {
  Model m(toy_spec(), 9);
  SyntheticDataset data(toy_data(), 2);
  Batch b = data.batch(0).as_batch();
  for (std::size_t t = 0; t < 2; ++t) {
    per_task_gradients(m, b, t, 1.0);
    ParameterPartition p = m.partition();
    for (const auto& np : p.per_task[1 - t])
      for (double g : np.tensor->grad()) EXPECT_EQ(g, 0.0) << np.name;
    bool any = false;
    for (const auto& np : p.per_task[t])
      for (double g : np.tensor->grad()) any = any || g != 0.0;
    EXPECT_TRUE(any);
  }
}

TEST(PerTaskGradients, NormRoutingKeepsOtherTasksOutput) {
  Model m(toy_spec(), 9);
  SyntheticDataset data(toy_data(), 2);
  Batch b = data.batch(0).as_batch();
  const double before = task_loss(m, b, 0, BnMode::train);
  for (std::size_t l = 0; l < 2; ++l)
    for (double& g : m.trunk_norm(l).state(1).gamma.values()) g *= 3.0;
  EXPECT_EQ(task_loss(m, b, 0, BnMode::train), before);
  Model fresh(toy_spec(), 9);
  EXPECT_NE(task_loss(m, b, 1, BnMode::train), task_loss(fresh, b, 1, BnMode::train));
}

TEST(PerTaskGradients, SnapshotsAreIndependentCopies) {
  Model m(toy_spec(), 9);
  SyntheticDataset data(toy_data(), 2);
  TaskGradients g = per_task_gradients(m, data.batch(0).as_batch(), 0, 1.0);
  const auto copy = g.shared.entries;
  per_task_gradients(m, data.batch(1).as_batch(), 1, 1.0);
  for (double& v : m.trunk_layer(0).weight.values()) v += 1.0;
  m.zero_grad();
  EXPECT_EQ(g.shared.entries, copy);
}

TEST(PerTaskGradients, EntriesMatchParameterLengths) {
  Model m(toy_spec(), 9);
  SyntheticDataset data(toy_data(), 2);
  TaskGradients g = per_task_gradients(m, data.batch(0).as_batch(), 0, 1.0);
  ParameterPartition p = m.partition();
  EXPECT_EQ(g.shared.entries.size(), p.shared.size());
  for (const auto& np : p.shared) EXPECT_EQ(g.shared.at(np.name).size(), np.tensor->size());
}

TEST(PerTaskGradients, WeightedSumMatchesJointLoss) {
  Model m(toy_spec(), 21);
  SyntheticDataset data(toy_data(), 3);
  Batch b = data.batch(0).as_batch();
  const std::vector<double> w{0.3, 1.7};
  std::map<std::string, std::vector<double>> summed;
  for (std::size_t t = 0; t < 2; ++t) {
    TaskGradients g = per_task_gradients(m, b, t, w[t], BnMode::train, false);
    for (const auto& [name, v] : g.shared.entries) {
      auto& acc = summed[name];
      acc.resize(v.size(), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
    }
  }
  m.zero_grad();
  Tape tape;
  Var x = tape.constant(b.input);
  std::vector<Var> terms;
  for (std::size_t t = 0; t < 2; ++t) {
    Var pred = m.forward(tape, x, t, BnMode::train, false);
    terms.push_back(scale(tape, compute_loss(tape, pred, b.targets[t], m.spec().tasks[t].loss), w[t]));
  }
  tape.backward(add_all(tape, terms));
  for (const auto& np : m.partition().shared)
    for (std::size_t i = 0; i < np.tensor->size(); ++i) EXPECT_NEAR(np.tensor->grad()[i], summed[np.name][i], 1e-10);
}

TEST(PerTaskGradients, UnknownTaskIsLookupError) {
  Model m(toy_spec(), 1);
  SyntheticDataset data(toy_data(), 2);
  EXPECT_THROW(per_task_gradients(m, data.batch(0).as_batch(), 2, 1.0), LookupError);
}

TEST(Synthetic, DeterministicAndShaped) {
  SyntheticConfig c = toy_data(5, 7);
  SyntheticDataset a(c, 11), b(c, 11), other(c, 12);
  SyntheticBatch x = a.batch(3), y = b.batch(3), z = other.batch(3);
  EXPECT_EQ(x.input.values(), y.input.values());
  EXPECT_EQ(*x.classes, *y.classes);
  EXPECT_EQ(x.depth->values(), y.depth->values());
  EXPECT_NE(x.input.values(), z.input.values());
  EXPECT_NE(a.batch(4).input.values(), x.input.values());
  EXPECT_EQ(x.input.shape(), (Shape{5, 3, 7, 7}));
  EXPECT_EQ(x.classes->size(), 5u * 7u * 7u);
  EXPECT_EQ(x.depth->shape(), (Shape{5, 1, 7, 7}));
}

TEST(Synthetic, ConstantPredictorCrossEntropyNearLogC) {
  SyntheticConfig c = toy_data(100, 10);
  SyntheticDataset data(c, 5);
  std::vector<double> counts(c.num_classes, 0.0);
  double total = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {  // 10^4 samples
    const SyntheticBatch b = data.batch(i);
    for (int k : *b.classes) counts[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double n : counts) total += n;
  double best_constant_ce = 0.0;
  for (double n : counts) best_constant_ce -= n / total * std::log(n / total);
  EXPECT_NEAR(best_constant_ce / std::log(static_cast<double>(c.num_classes)), 1.0, 0.02);
}

TEST(Synthetic, InvalidConfig) {
  SyntheticConfig c;
  c.num_classes = 1;
  EXPECT_THROW(SyntheticDataset(c, 0), ConfigError);
}
