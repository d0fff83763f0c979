#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/ops.hpp"
#include "csmtl/tape.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

enum class BnMode { train, eval };

/// Affine parameters and running statistics of one task's normalization.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  explicit BatchNormState(std::size_t channels)
      : gamma(Shape{channels}, 1.0),
        beta(Shape{channels}, 0.0),
        running_mean(Shape{channels}, 0.0),
        running_var(Shape{channels}, 1.0) {}

  std::size_t channels() const { return gamma.size(); }
};

/// Batch normalization with one state per task. Every task sees the same
/// input layout; the task index selects whose scale, shift and statistics
/// apply.
class TaskBatchNorm {
 public:
  static constexpr double kDefaultEpsilon = 1e-5;
  static constexpr double kDefaultMomentum = 0.1;

  TaskBatchNorm(std::size_t channels, std::size_t num_tasks, double epsilon = kDefaultEpsilon,
                double momentum = kDefaultMomentum)
      : epsilon_(epsilon), momentum_(momentum) {
    if (channels == 0) throw DimensionError("batch norm needs at least one channel");
    if (!(epsilon > 0.0)) throw ConfigError("batch norm epsilon must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("batch norm momentum must lie in (0, 1)");
    states_.reserve(num_tasks);
    for (std::size_t i = 0; i < num_tasks; ++i) states_.emplace_back(channels);
  }

  std::size_t num_tasks() const { return states_.size(); }
  std::size_t channels() const { return states_.front().channels(); }
  double epsilon() const { return epsilon_; }
  double momentum() const { return momentum_; }

  BatchNormState& state(std::size_t task) {
    if (task >= states_.size()) throw LookupError("no batch-norm state for task " + std::to_string(task));
    return states_[task];
  }
  const BatchNormState& state(std::size_t task) const {
    if (task >= states_.size()) throw LookupError("no batch-norm state for task " + std::to_string(task));
    return states_[task];
  }

  /// z = gamma * (y - mean) / sqrt(var + eps) + beta, per channel of an
  /// [N,C,H,W] tensor. Train mode normalizes with the biased batch
  /// statistics and, when `update_running` is set, folds them into the
  /// running estimates; eval mode uses the running estimates.
  Var forward(Tape& tape, Var input, std::size_t task, BnMode mode, bool update_running = true) {
    BatchNormState& st = state(task);
    const Tensor& y = tape.value(input);
    detail::require_rank(y, 4, "batch norm input");
    const std::size_t n = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
    if (c != st.channels()) {
      throw DimensionError("batch norm: input has " + std::to_string(c) + " channels, state has " +
                           std::to_string(st.channels()));
    }
    const std::size_t count = n * plane;
    if (mode == BnMode::train && count < 2) {
      throw DimensionError("batch norm train mode needs >= 2 elements per channel, got " + std::to_string(count));
    }

    std::vector<double> mean(c), inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double m = 0.0, v = 0.0;
      if (mode == BnMode::train) {
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < plane; ++j) m += y[(b * c + ch) * plane + j];
        m /= static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < plane; ++j) {
            const double d = y[(b * c + ch) * plane + j] - m;
            v += d * d;
          }
        v /= static_cast<double>(count);
        if (update_running) {
          st.running_mean[ch] = (1.0 - momentum_) * st.running_mean[ch] + momentum_ * m;
          st.running_var[ch] = (1.0 - momentum_) * st.running_var[ch] + momentum_ * v;
        }
      } else {
        m = st.running_mean[ch];
        v = st.running_var[ch];
        if (v < 0.0) throw InvariantError("negative running variance in batch norm state");
      }
      mean[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(v + epsilon_);
    }

    Tensor z(y.shape());
    std::vector<double> xhat(y.size());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < plane; ++j) {
          const std::size_t idx = (b * c + ch) * plane + j;
          xhat[idx] = (y[idx] - mean[ch]) * inv_std[ch];
          z[idx] = st.gamma[ch] * xhat[idx] + st.beta[ch];
        }

    const Var gamma = tape.leaf(st.gamma);
    const Var beta = tape.leaf(st.beta);
    const bool batch_stats = mode == BnMode::train;
    return tape.record(
        OpTag::batch_norm, {input, gamma, beta}, std::move(z),
        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, count, batch_stats](
            Tape& t, const Tape::Node& node) {
          const Var yin = detail::in(node, 0), gin = detail::in(node, 1), bin = detail::in(node, 2);
          const auto& dz = t.tensor(detail::out(node)).grad();
          const auto& g = t.tensor(gin).values();
          std::vector<double> sum_dz(c, 0.0), sum_dz_xhat(c, 0.0);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t j = 0; j < plane; ++j) {
                const std::size_t idx = (b * c + ch) * plane + j;
                sum_dz[ch] += dz[idx];
                sum_dz_xhat[ch] += dz[idx] * xhat[idx];
              }
          if (t.requires_grad(gin)) {
            auto& dg = t.tensor(gin).grad();
            for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_dz_xhat[ch];
          }
          if (t.requires_grad(bin)) {
            auto& db = t.tensor(bin).grad();
            for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_dz[ch];
          }
          if (!t.requires_grad(yin)) return;
          auto& dy = t.tensor(yin).grad();
          const double inv_count = 1.0 / static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t j = 0; j < plane; ++j) {
                const std::size_t idx = (b * c + ch) * plane + j;
                if (batch_stats) {
                  dy[idx] += g[ch] * inv_std[ch] *
                             (dz[idx] - inv_count * sum_dz[ch] - xhat[idx] * inv_count * sum_dz_xhat[ch]);
                } else {
                  dy[idx] += g[ch] * inv_std[ch] * dz[idx];
                }
              }
        });
  }

 private:
  std::vector<BatchNormState> states_;
  double epsilon_;
  double momentum_;
};

/// Free-function form: normalizes `input` with the given task's state.
inline Var task_batchnorm_forward(Tape& tape, Var input, TaskBatchNorm& bn, std::size_t task, BnMode mode) {
  return bn.forward(tape, input, task, mode);
}

}  // namespace csmtl
