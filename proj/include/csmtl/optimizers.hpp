#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/network.hpp"
#include "csmtl/projection.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/strength.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

enum class Phase { phase1, phase2 };

inline const char* phase_name(Phase p) { return p == Phase::phase1 ? "phase1" : "phase2"; }

struct PhaseDraw {
  double p = 0.0;
  Phase phase = Phase::phase1;
};

/// One uniform draw P; Phase 1 iff P >= e/E.
inline PhaseDraw draw_phase(std::size_t epoch, std::size_t total_epochs, Rng& rng) {
  if (total_epochs == 0) throw ConfigError("phase selection needs total_epochs > 0");
  if (epoch > total_epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " exceeds total_epochs " + std::to_string(total_epochs));
  }
  PhaseDraw d;
  d.p = rng.uniform();
  const double threshold = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  d.phase = d.p >= threshold ? Phase::phase1 : Phase::phase2;
  return d;
}

inline Phase select_phase(std::size_t epoch, std::size_t total_epochs, Rng& rng) {
  return draw_phase(epoch, total_epochs, rng).phase;
}

enum class UpdateKind { sgd, adam };

struct UpdateRule {
  UpdateKind kind = UpdateKind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Applies gradient steps to parameter tensors and counts writes per
/// tensor. With adam the moments are kept per tensor and the step counter
/// advances on every write to that tensor.
class ParameterUpdater {
 public:
  explicit ParameterUpdater(UpdateRule rule = {}) : rule_(rule) {
    if (rule_.kind == UpdateKind::adam) {
      if (!(rule_.beta1 >= 0.0 && rule_.beta1 < 1.0) || !(rule_.beta2 >= 0.0 && rule_.beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in [0, 1)");
      }
      if (!(rule_.epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    }
  }

  const UpdateRule& rule() const { return rule_; }

  void apply(Tensor& param, std::span<const double> grad, double lr) {
    if (grad.size() != param.size()) {
      throw DimensionError("update of a " + std::to_string(param.size()) + "-element tensor with a " +
                           std::to_string(grad.size()) + "-element gradient");
    }
    for (double g : grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient entry in parameter update");
    }
    ++writes_[&param];
    auto& v = param.values();
    if (rule_.kind == UpdateKind::sgd) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * grad[i];
      return;
    }
    Moments& m = moments_[&param];
    if (m.first.empty()) {
      m.first.assign(v.size(), 0.0);
      m.second.assign(v.size(), 0.0);
    }
    ++m.steps;
    const double c1 = 1.0 - std::pow(rule_.beta1, static_cast<double>(m.steps));
    const double c2 = 1.0 - std::pow(rule_.beta2, static_cast<double>(m.steps));
    for (std::size_t i = 0; i < v.size(); ++i) {
      m.first[i] = rule_.beta1 * m.first[i] + (1.0 - rule_.beta1) * grad[i];
      m.second[i] = rule_.beta2 * m.second[i] + (1.0 - rule_.beta2) * grad[i] * grad[i];
      v[i] -= lr * (m.first[i] / c1) / (std::sqrt(m.second[i] / c2) + rule_.epsilon);
    }
  }

  std::size_t writes(const Tensor& param) const {
    auto it = writes_.find(&param);
    return it == writes_.end() ? 0 : it->second;
  }
  void reset_write_counts() { writes_.clear(); }

 private:
  struct Moments {
    std::vector<double> first, second;
    std::size_t steps = 0;
  };
  UpdateRule rule_;
  std::unordered_map<const Tensor*, std::size_t> writes_;
  std::unordered_map<const Tensor*, Moments> moments_;
};

enum class Method { ours, gd, pcgrad };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::ours: return "ours";
    case Method::gd: return "gd";
    case Method::pcgrad: return "pcgrad";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "ours") return Method::ours;
  if (s == "gd") return Method::gd;
  if (s == "pcgrad") return Method::pcgrad;
  throw ConfigError("unknown method '" + s + "' (expected ours, gd or pcgrad)");
}

struct OptimizerConfig {
  Method method = Method::ours;
  double learning_rate = 0.01;
  UpdateRule update;
  std::vector<std::size_t> task_order;  // empty means 0..K-1

  void validate(std::size_t num_tasks) const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (task_order.empty()) return;
    if (task_order.size() != num_tasks) throw ConfigError("task order must list every task exactly once");
    std::vector<bool> seen(num_tasks, false);
    for (std::size_t t : task_order) {
      if (t >= num_tasks || seen[t]) throw ConfigError("task order is not a permutation of the tasks");
      seen[t] = true;
    }
  }
};

struct LayerProjectionLog {
  std::string layer;
  std::size_t pairs = 0;
  std::size_t conflicts = 0;
  std::size_t projections = 0;
  double min_post_dot = std::numeric_limits<double>::infinity();
};

struct StepReport {
  std::vector<double> losses;  // unweighted, per task
  std::vector<LayerProjectionLog> layers;
};

/// Two-phase steps and the two reference baselines on one model. The
/// model must outlive the optimizer.
class MultiTaskOptimizer {
 public:
  MultiTaskOptimizer(Model& model, OptimizerConfig config)
      : model_(model), config_(std::move(config)), updater_(config_.update) {
    config_.validate(model_.num_tasks());
    if (config_.task_order.empty()) {
      config_.task_order.resize(model_.num_tasks());
      std::iota(config_.task_order.begin(), config_.task_order.end(), std::size_t{0});
    }
  }

  const OptimizerConfig& config() const { return config_; }
  ParameterUpdater& updater() { return updater_; }
  const ParameterUpdater& updater() const { return updater_; }
  Model& model() { return model_; }

  /// Sequential per-task updates: task i is evaluated at the shared
  /// parameters left by task i-1, then shared and own parameters step by
  /// -lr * w_i * grad.
  StepReport phase1_step(const Batch& batch, std::span<const double> weights, double lr) {
    check_weights(weights);
    updater_.reset_write_counts();
    StepReport report;
    report.losses.assign(model_.num_tasks(), 0.0);
    for (std::size_t task : config_.task_order) {
      TaskGradients tg = gradients_for(batch, task, weights[task]);
      report.losses[task] = tg.loss;
      ParameterPartition part = model_.partition();
      for (const NamedParam& p : part.shared) updater_.apply(*p.tensor, tg.shared.at(p.name), lr);
      for (const NamedParam& p : part.per_task[task]) updater_.apply(*p.tensor, tg.own.at(p.name), lr);
    }
    return report;
  }
  StepReport phase1_step(const Batch& batch, std::span<const double> weights) {
    return phase1_step(batch, weights, config_.learning_rate);
  }

  /// Priority-preserving projection. Every trunk conv weight is split by
  /// the snapshot's channel groups; inside group i the other tasks'
  /// weighted gradients are projected against task i's. Everything else
  /// takes the plain weighted sum.
  StepReport phase2_step(const Batch& batch, const std::vector<StrengthReport>& snapshot,
                         std::span<const double> weights, double lr,
                         ProjectionGuard guard = ProjectionGuard::conflicting_only) {
    check_weights(weights);
    check_snapshot(snapshot);
    updater_.reset_write_counts();
    StepReport report;
    std::vector<TaskGradients> all = all_gradients(batch, weights, report);
    ParameterPartition part = model_.partition();
    std::map<std::string, const StrengthReport*> by_layer;
    for (const StrengthReport& r : snapshot) by_layer[r.layer] = &r;

    std::vector<std::vector<double>> combined;
    combined.reserve(part.shared.size());
    std::vector<std::vector<double>> per_task(model_.num_tasks());
    for (const NamedParam& p : part.shared) {
      for (std::size_t t = 0; t < per_task.size(); ++t) per_task[t] = all[t].shared.at(p.name);
      auto it = by_layer.find(p.name);
      if (it == by_layer.end()) {
        combined.push_back(plain_sum(per_task));
        continue;
      }
      const StrengthReport& r = *it->second;
      const std::size_t per_channel = p.tensor->size() / r.num_channels();
      std::vector<std::vector<std::size_t>> flat_groups;
      for (const auto& g : r.groups) flat_groups.push_back(channel_slice_indices(g, per_channel));
      ProjectionStats stats;
      combined.push_back(grouped_projected_sum(per_task, flat_groups, guard, &stats));
      report.layers.push_back({p.name, stats.pairs, stats.conflicts, stats.projections, stats.min_post_dot});
    }
    apply_combined(part, combined, all, lr);
    return report;
  }
  StepReport phase2_step(const Batch& batch, const std::vector<StrengthReport>& snapshot,
                         std::span<const double> weights) {
    return phase2_step(batch, snapshot, weights, config_.learning_rate);
  }

  /// Theta_s steps by -lr * sum_i w_i g_i; each Theta_i by its own task.
  StepReport baseline_gd_step(const Batch& batch, std::span<const double> weights, double lr) {
    check_weights(weights);
    updater_.reset_write_counts();
    StepReport report;
    std::vector<TaskGradients> all = all_gradients(batch, weights, report);
    ParameterPartition part = model_.partition();
    std::vector<std::vector<double>> combined;
    std::vector<std::vector<double>> per_task(model_.num_tasks());
    for (const NamedParam& p : part.shared) {
      for (std::size_t t = 0; t < per_task.size(); ++t) per_task[t] = all[t].shared.at(p.name);
      combined.push_back(plain_sum(per_task));
    }
    apply_combined(part, combined, all, lr);
    return report;
  }
  StepReport baseline_gd_step(const Batch& batch, std::span<const double> weights) {
    return baseline_gd_step(batch, weights, config_.learning_rate);
  }

  /// Pairwise projection over the full flattened shared gradient. Each
  /// task's gradient is projected in turn against every other task's
  /// original gradient, in an order shuffled from `rng`, whenever the pair
  /// conflicts.
  StepReport baseline_pcgrad_step(const Batch& batch, std::span<const double> weights, double lr, Rng& rng) {
    check_weights(weights);
    updater_.reset_write_counts();
    StepReport report;
    std::vector<TaskGradients> all = all_gradients(batch, weights, report);
    ParameterPartition part = model_.partition();
    const std::size_t k = model_.num_tasks();

    std::vector<std::vector<double>> flat(k);
    for (std::size_t t = 0; t < k; ++t)
      for (const NamedParam& p : part.shared) {
        const auto& g = all[t].shared.at(p.name);
        flat[t].insert(flat[t].end(), g.begin(), g.end());
      }
    LayerProjectionLog log{"shared", 0, 0, 0, std::numeric_limits<double>::infinity()};
    std::vector<std::vector<double>> projected = flat;
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<std::size_t> others;
      for (std::size_t j = 0; j < k; ++j)
        if (j != i) others.push_back(j);
      rng.shuffle(others);
      for (std::size_t j : others) {
        ++log.pairs;
        if (dot(projected[i], flat[j]) < 0.0) {
          ++log.conflicts;
          if (squared_norm(flat[j]) > 0.0) ++log.projections;
          projected[i] = project_gradient(projected[i], flat[j]);
        }
      }
    }
    const std::vector<double> total = plain_sum(projected);
    std::vector<std::vector<double>> combined;
    std::size_t offset = 0;
    for (const NamedParam& p : part.shared) {
      combined.emplace_back(total.begin() + static_cast<std::ptrdiff_t>(offset),
                            total.begin() + static_cast<std::ptrdiff_t>(offset + p.tensor->size()));
      offset += p.tensor->size();
    }
    report.layers.push_back(log);
    apply_combined(part, combined, all, lr);
    return report;
  }
  StepReport baseline_pcgrad_step(const Batch& batch, std::span<const double> weights, Rng& rng) {
    return baseline_pcgrad_step(batch, weights, config_.learning_rate, rng);
  }

 private:
  void check_weights(std::span<const double> weights) const {
    if (weights.size() != model_.num_tasks()) {
      throw ConfigError("expected " + std::to_string(model_.num_tasks()) + " task weights, got " +
                        std::to_string(weights.size()));
    }
    for (double w : weights) {
      if (!std::isfinite(w)) throw ConfigError("task weights must be finite");
    }
  }

  void check_snapshot(const std::vector<StrengthReport>& snapshot) const {
    std::vector<std::size_t> normed;
    for (std::size_t l = 0; l < model_.num_trunk_layers(); ++l)
      if (model_.has_norm(l)) normed.push_back(l);
    if (snapshot.size() != normed.size()) {
      throw InvariantError("strength snapshot has " + std::to_string(snapshot.size()) + " layers, model has " +
                           std::to_string(normed.size()) + " normalized trunk layers");
    }
    for (std::size_t i = 0; i < snapshot.size(); ++i) {
      const StrengthReport& r = snapshot[i];
      const ConvParams& conv = model_.trunk_layer(normed[i]);
      if (r.layer != Model::trunk_weight_name(normed[i]) || r.num_channels() != conv.spec.out_channels ||
          r.num_tasks() != model_.num_tasks() || r.groups.size() != model_.num_tasks()) {
        throw InvariantError("stale strength snapshot for layer '" + r.layer + "'");
      }
    }
  }

  TaskGradients gradients_for(const Batch& batch, std::size_t task, double weight) {
    try {
      return per_task_gradients(model_, batch, task, weight);
    } catch (const NumericError& e) {
      throw NumericError(std::string("step aborted in task ") + std::to_string(task) + ": " + e.what());
    }
  }

  std::vector<TaskGradients> all_gradients(const Batch& batch, std::span<const double> weights, StepReport& report) {
    std::vector<TaskGradients> all;
    report.losses.assign(model_.num_tasks(), 0.0);
    for (std::size_t t = 0; t < model_.num_tasks(); ++t) {
      all.push_back(gradients_for(batch, t, weights[t]));
      report.losses[t] = all.back().loss;
    }
    return all;
  }

  void apply_combined(ParameterPartition& part, const std::vector<std::vector<double>>& combined,
                      const std::vector<TaskGradients>& all, double lr) {
    for (std::size_t i = 0; i < part.shared.size(); ++i) updater_.apply(*part.shared[i].tensor, combined[i], lr);
    for (std::size_t t = 0; t < part.per_task.size(); ++t)
      for (const NamedParam& p : part.per_task[t]) updater_.apply(*p.tensor, all[t].own.at(p.name), lr);
  }

  Model& model_;
  OptimizerConfig config_;
  ParameterUpdater updater_;
};

}  // namespace csmtl
