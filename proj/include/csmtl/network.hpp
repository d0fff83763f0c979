#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "csmtl/batchnorm.hpp"
#include "csmtl/errors.hpp"
#include "csmtl/ops.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/tape.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool bias = true;
  bool batch_norm = true;  // trunk only: per-task batch norm after the conv
  bool relu = true;        // trunk only
};

struct TaskSpec {
  std::string name;
  LossKind loss = LossKind::mse;
  double weight = 1.0;
};

/// Shared trunk of conv -> per-task batch norm -> relu layers, then one
/// conv head per task. Head layers are conv (+bias), with relu between
/// them but not after the last. An empty head predicts from the trunk
/// features directly. Trunk layers may drop the bias, the norm or the relu.
struct ModelSpec {
  std::vector<ConvSpec> trunk;
  std::vector<std::vector<ConvSpec>> heads;
  std::vector<TaskSpec> tasks;

  std::size_t num_tasks() const { return tasks.size(); }

  void validate() const {
    if (tasks.empty()) throw ConfigError("model needs at least one task");
    if (trunk.empty()) throw ConfigError("model needs at least one trunk layer");
    if (heads.size() != tasks.size()) {
      throw ConfigError("model has " + std::to_string(tasks.size()) + " tasks but " + std::to_string(heads.size()) +
                        " heads");
    }
    std::set<std::string> names;
    for (const TaskSpec& t : tasks) {
      if (!names.insert(t.name).second) throw ConfigError("duplicate task name '" + t.name + "'");
      if (!(t.weight >= 0.0) || !std::isfinite(t.weight)) {
        throw ConfigError("task '" + t.name + "' weight must be a finite nonnegative number");
      }
    }
    auto check_layer = [](const ConvSpec& c, const std::string& where) {
      if (c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
        throw ConfigError(where + ": channel counts, kernel and stride must be positive");
      }
    };
    for (std::size_t l = 0; l < trunk.size(); ++l) {
      const std::string where = "trunk[" + std::to_string(l) + "]";
      check_layer(trunk[l], where);
      if (l > 0 && trunk[l].in_channels != trunk[l - 1].out_channels) {
        throw ConfigError(where + " expects " + std::to_string(trunk[l].in_channels) +
                          " input channels but the previous layer outputs " +
                          std::to_string(trunk[l - 1].out_channels));
      }
    }
    for (std::size_t t = 0; t < heads.size(); ++t) {
      std::size_t prev = trunk.back().out_channels;
      for (std::size_t l = 0; l < heads[t].size(); ++l) {
        const std::string where = "heads[" + std::to_string(t) + "][" + std::to_string(l) + "]";
        check_layer(heads[t][l], where);
        if (heads[t][l].in_channels != prev) {
          throw ConfigError(where + " expects " + std::to_string(heads[t][l].in_channels) +
                            " input channels but receives " + std::to_string(prev));
        }
        prev = heads[t][l].out_channels;
      }
    }
  }
};

struct ConvParams {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;
};

struct NamedParam {
  std::string name;
  Tensor* tensor = nullptr;
};

/// Theta = {Theta_s, Theta_1, ..., Theta_K}: trunk conv weights and biases
/// are shared; every task owns its head and its batch-norm gamma/beta.
struct ParameterPartition {
  std::vector<NamedParam> shared;
  std::vector<std::vector<NamedParam>> per_task;

  std::size_t total() const {
    std::size_t n = shared.size();
    for (const auto& p : per_task) n += p.size();
    return n;
  }
};

/// Per-task gradient snapshot keyed by parameter name.
struct GradientSet {
  std::size_t task = 0;
  std::map<std::string, std::vector<double>> entries;

  const std::vector<double>& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw LookupError("gradient set has no entry '" + name + "'");
    return it->second;
  }
};

struct Batch {
  Tensor input;
  std::vector<Target> targets;  // one per task
};

struct TaskGradients {
  double loss = 0.0;  // unweighted task loss
  GradientSet shared;
  GradientSet own;
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    auto make_conv = [&rng](const ConvSpec& c) {
      ConvParams p{c, Tensor(Shape{c.out_channels, c.in_channels, c.kernel, c.kernel}), Tensor(Shape{c.out_channels})};
      if (!c.bias) p.bias = Tensor(Shape{c.out_channels}, 0.0);
      const double bound = std::sqrt(1.0 / static_cast<double>(c.in_channels * c.kernel * c.kernel));
      for (double& v : p.weight.values()) v = rng.uniform(-bound, bound);
      if (c.bias)
        for (double& v : p.bias.values()) v = rng.uniform(-bound, bound);
      return p;
    };
    for (const ConvSpec& c : spec_.trunk) {
      trunk_.push_back(make_conv(c));
      trunk_bn_.push_back(c.batch_norm ? std::make_unique<TaskBatchNorm>(c.out_channels, spec_.num_tasks()) : nullptr);
    }
    heads_.resize(spec_.num_tasks());
    for (std::size_t t = 0; t < spec_.num_tasks(); ++t)
      for (const ConvSpec& c : spec_.heads[t]) heads_[t].push_back(make_conv(c));
  }

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_tasks() const { return spec_.num_tasks(); }
  std::size_t num_trunk_layers() const { return trunk_.size(); }

  ConvParams& trunk_layer(std::size_t l) { return trunk_.at(l); }
  const ConvParams& trunk_layer(std::size_t l) const { return trunk_.at(l); }
  bool has_norm(std::size_t l) const { return trunk_bn_.at(l) != nullptr; }
  TaskBatchNorm& trunk_norm(std::size_t l) { return *norm_or_throw(l); }
  const TaskBatchNorm& trunk_norm(std::size_t l) const { return *norm_or_throw(l); }
  std::vector<ConvParams>& head(std::size_t t) { return heads_.at(t); }

  static std::string trunk_weight_name(std::size_t l) { return "trunk." + std::to_string(l) + ".weight"; }
  static std::string trunk_bias_name(std::size_t l) { return "trunk." + std::to_string(l) + ".bias"; }

  /// Every parameter tensor with a stable, unique name.
  std::vector<NamedParam> parameters() {
    ParameterPartition p = partition();
    std::vector<NamedParam> all = p.shared;
    for (auto& task : p.per_task) all.insert(all.end(), task.begin(), task.end());
    return all;
  }

  ParameterPartition partition() {
    ParameterPartition p;
    p.per_task.resize(num_tasks());
    for (std::size_t l = 0; l < trunk_.size(); ++l) {
      p.shared.push_back({trunk_weight_name(l), &trunk_[l].weight});
      if (trunk_[l].spec.bias) p.shared.push_back({trunk_bias_name(l), &trunk_[l].bias});
    }
    for (std::size_t t = 0; t < num_tasks(); ++t) {
      const std::string tp = "task" + std::to_string(t);
      for (std::size_t l = 0; l < trunk_.size(); ++l) {
        if (!trunk_bn_[l]) continue;
        BatchNormState& st = trunk_bn_[l]->state(t);
        p.per_task[t].push_back({"trunk." + std::to_string(l) + ".bn." + tp + ".gamma", &st.gamma});
        p.per_task[t].push_back({"trunk." + std::to_string(l) + ".bn." + tp + ".beta", &st.beta});
      }
      for (std::size_t l = 0; l < heads_[t].size(); ++l) {
        p.per_task[t].push_back({"head." + tp + "." + std::to_string(l) + ".weight", &heads_[t][l].weight});
        if (heads_[t][l].spec.bias)
          p.per_task[t].push_back({"head." + tp + "." + std::to_string(l) + ".bias", &heads_[t][l].bias});
      }
    }
    return p;
  }

  void zero_grad() {
    for (NamedParam& p : parameters()) p.tensor->zero_grad();
  }

  /// Forward pass of one task: trunk with that task's batch-norm state,
  /// then that task's head.
  Var forward(Tape& tape, Var input, std::size_t task, BnMode mode, bool update_running = true) {
    if (task >= num_tasks()) throw LookupError("model has no task " + std::to_string(task));
    Var h = input;
    for (std::size_t l = 0; l < trunk_.size(); ++l) {
      ConvParams& c = trunk_[l];
      h = conv2d(tape, h, tape.leaf(c.weight), c.spec.stride, c.spec.padding);
      if (c.spec.bias) h = add_channel_bias(tape, h, tape.leaf(c.bias));
      if (trunk_bn_[l]) h = trunk_bn_[l]->forward(tape, h, task, mode, update_running);
      if (c.spec.relu) h = relu(tape, h);
    }
    auto& head = heads_[task];
    for (std::size_t l = 0; l < head.size(); ++l) {
      ConvParams& c = head[l];
      h = conv2d(tape, h, tape.leaf(c.weight), c.spec.stride, c.spec.padding);
      if (c.spec.bias) h = add_channel_bias(tape, h, tape.leaf(c.bias));
      if (l + 1 < head.size()) h = relu(tape, h);
    }
    return h;
  }

 private:
  TaskBatchNorm* norm_or_throw(std::size_t l) const {
    if (!trunk_bn_.at(l)) throw LookupError("trunk layer " + std::to_string(l) + " has no batch norm");
    return trunk_bn_[l].get();
  }

  ModelSpec spec_;
  std::vector<ConvParams> trunk_;
  std::vector<std::unique_ptr<TaskBatchNorm>> trunk_bn_;
  std::vector<std::vector<ConvParams>> heads_;
};

/// Seeded construction: uniform(-a, a) weights with a = sqrt(1/fan_in),
/// gamma = 1, beta = 0, running statistics (0, 1).
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

inline ParameterPartition partition_parameters(Model& model) { return model.partition(); }

/// Forward and backward of loss_weight * L_task. Zeroes all model grads
/// first; gradients are copied out so later passes cannot alias them.
inline TaskGradients per_task_gradients(Model& model, const Batch& batch, std::size_t task, double loss_weight,
                                        BnMode mode = BnMode::train, bool update_running = true) {
  if (task >= model.num_tasks()) throw LookupError("model has no task " + std::to_string(task));
  if (task >= batch.targets.size() || batch.targets[task].empty()) {
    throw DataError("batch has no target for task " + std::to_string(task));
  }
  model.zero_grad();
  Tape tape;
  const Var x = tape.constant(batch.input);
  const Var pred = model.forward(tape, x, task, mode, update_running);
  const Var loss = compute_loss(tape, pred, batch.targets[task], model.spec().tasks[task].loss);
  const double value = tape.value(loss).item();
  if (!std::isfinite(value)) {
    throw NumericError("task " + std::to_string(task) + " produced non-finite loss " + std::to_string(value));
  }
  tape.backward(scale(tape, loss, loss_weight));

  TaskGradients out;
  out.loss = value;
  out.shared.task = task;
  out.own.task = task;
  ParameterPartition part = model.partition();
  for (const NamedParam& p : part.shared) out.shared.entries[p.name] = p.tensor->grad();
  for (const NamedParam& p : part.per_task[task]) out.own.entries[p.name] = p.tensor->grad();
  return out;
}

/// Unweighted task loss without touching gradients or running statistics.
inline double task_loss(Model& model, const Batch& batch, std::size_t task, BnMode mode) {
  if (task >= batch.targets.size() || batch.targets[task].empty()) {
    throw DataError("batch has no target for task " + std::to_string(task));
  }
  Tape tape;
  const Var x = tape.constant(batch.input);
  const Var pred = model.forward(tape, x, task, mode, /*update_running=*/false);
  return tape.value(compute_loss(tape, pred, batch.targets[task], model.spec().tasks[task].loss)).item();
}

}  // namespace csmtl
