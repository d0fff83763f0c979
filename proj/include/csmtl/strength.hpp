#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "csmtl/batchnorm.hpp"
#include "csmtl/errors.hpp"
#include "csmtl/network.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

/// Table indexed [task][channel].
using StrengthTable = std::vector<std::vector<double>>;

/// Connection strengths of one shared conv layer followed by task-specific
/// batch norm, with the channel groups derived from them.
struct StrengthReport {
  std::string layer;
  StrengthTable raw;         // S[task][channel]
  StrengthTable normalized;  // S-hat[task][channel], each row sums to 1
  std::vector<std::vector<std::size_t>> groups;  // CG[task] = channels whose top task it is

  std::size_t num_tasks() const { return raw.size(); }
  std::size_t num_channels() const { return raw.empty() ? 0 : raw.front().size(); }
};

/// Mean squared kernel entry between out-channel p and in-channel q.
inline double kernel_strength(const Tensor& weight, std::size_t p, std::size_t q) {
  if (weight.rank() != 4) throw DimensionError("kernel_strength expects a [Cout,Cin,K,K] weight");
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (p >= cout || q >= cin) {
    throw DimensionError("kernel_strength index (" + std::to_string(p) + ", " + std::to_string(q) +
                         ") outside weight of shape " + shape_string(weight.shape()));
  }
  const std::size_t base = (p * cin + q) * kh * kw;
  double acc = 0.0;
  for (std::size_t i = 0; i < kh * kw; ++i) acc += weight[base + i] * weight[base + i];
  return acc / static_cast<double>(kh * kw);
}

/// gamma_p^2 / (var_p + eps) * sum_q s_{p,q}; var is the running variance.
inline double channel_strength(const Tensor& weight, const BatchNormState& bn, double epsilon, std::size_t p) {
  if (p >= bn.channels()) throw DimensionError("channel_strength: channel " + std::to_string(p) + " out of range");
  const double var = bn.running_var[p];
  if (var < 0.0) throw InvariantError("negative running variance on channel " + std::to_string(p));
  double total = 0.0;
  for (std::size_t q = 0; q < weight.dim(1); ++q) total += kernel_strength(weight, p, q);
  const double g = bn.gamma[p];
  return g * g / (var + epsilon) * total;
}

/// Row-wise normalization. A row that sums to zero becomes uniform.
inline StrengthTable normalized_strength(const StrengthTable& raw) {
  StrengthTable out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& row = raw[i];
    double total = 0.0;
    for (double s : row) total += s;
    out[i].resize(row.size());
    for (std::size_t p = 0; p < row.size(); ++p) {
      out[i][p] = total > 0.0 ? row[p] / total : 1.0 / static_cast<double>(row.size());
    }
  }
  return out;
}

/// Assigns every channel to the task with the largest normalized strength;
/// ties go to the lowest task index.
inline std::vector<std::vector<std::size_t>> build_channel_groups(const StrengthTable& normalized) {
  std::vector<std::vector<std::size_t>> groups(normalized.size());
  if (normalized.empty()) return groups;
  const std::size_t channels = normalized.front().size();
  for (std::size_t p = 0; p < channels; ++p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < normalized.size(); ++i) {
      if (normalized[i][p] > normalized[best][p]) best = i;
    }
    groups[best].push_back(p);
  }
  return groups;
}

inline StrengthReport make_strength_report(std::string layer, StrengthTable raw) {
  StrengthReport r;
  r.layer = std::move(layer);
  r.normalized = normalized_strength(raw);
  r.groups = build_channel_groups(r.normalized);
  r.raw = std::move(raw);
  return r;
}

/// Strength report of trunk layer `l` of a model.
inline StrengthReport layer_strength_report(const Model& model, std::size_t l) {
  const ConvParams& conv = model.trunk_layer(l);
  const TaskBatchNorm& bn = model.trunk_norm(l);
  StrengthTable raw(model.num_tasks(), std::vector<double>(conv.spec.out_channels));
  for (std::size_t t = 0; t < model.num_tasks(); ++t)
    for (std::size_t p = 0; p < conv.spec.out_channels; ++p)
      raw[t][p] = channel_strength(conv.weight, bn.state(t), bn.epsilon(), p);
  return make_strength_report(Model::trunk_weight_name(l), std::move(raw));
}

/// One report per trunk layer that has task-specific batch norm.
inline std::vector<StrengthReport> strength_snapshot(const Model& model) {
  std::vector<StrengthReport> out;
  for (std::size_t l = 0; l < model.num_trunk_layers(); ++l)
    if (model.has_norm(l)) out.push_back(layer_strength_report(model, l));
  return out;
}

/// Checks the report invariants: normalized rows sum to 1, groups
/// partition the channels, and each channel sits with an argmax task.
/// Returns an empty string when all hold, otherwise a description.
inline std::string check_strength_report(const StrengthReport& r, double tolerance = 1e-9) {
  const std::size_t channels = r.num_channels();
  for (std::size_t i = 0; i < r.normalized.size(); ++i) {
    double total = 0.0;
    for (double s : r.normalized[i]) total += s;
    if (std::abs(total - 1.0) > tolerance) {
      return r.layer + ": normalized row of task " + std::to_string(i) + " sums to " + std::to_string(total);
    }
  }
  std::vector<int> seen(channels, 0);
  for (std::size_t i = 0; i < r.groups.size(); ++i)
    for (std::size_t p : r.groups[i]) {
      if (p >= channels) return r.layer + ": group channel out of range";
      if (seen[p]++) return r.layer + ": channel " + std::to_string(p) + " in more than one group";
      for (std::size_t j = 0; j < r.normalized.size(); ++j) {
        if (r.normalized[j][p] > r.normalized[i][p]) {
          return r.layer + ": channel " + std::to_string(p) + " not assigned to its top task";
        }
      }
    }
  for (std::size_t p = 0; p < channels; ++p) {
    if (!seen[p]) return r.layer + ": channel " + std::to_string(p) + " in no group";
  }
  return {};
}

}  // namespace csmtl
