#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

/// When a non-reference gradient is projected onto the reference's normal
/// plane. `conflicting_only` is the rule applied during training (project
/// only when g . ref < 0); `always` removes the reference component
/// unconditionally.
enum class ProjectionGuard { conflicting_only, always };

/// g - (g.ref / |ref|^2) ref when the guard fires; g unchanged otherwise or
/// when ref is zero.
inline std::vector<double> project_gradient(std::span<const double> g, std::span<const double> ref,
                                            ProjectionGuard guard = ProjectionGuard::conflicting_only) {
  if (g.size() != ref.size()) {
    throw DimensionError("project_gradient: lengths " + std::to_string(g.size()) + " and " +
                         std::to_string(ref.size()));
  }
  std::vector<double> out(g.begin(), g.end());
  const double ref_sq = squared_norm(ref);
  if (ref_sq == 0.0) return out;
  const double d = dot(g, ref);
  if (guard == ProjectionGuard::conflicting_only && !(d < 0.0)) return out;
  const double coef = d / ref_sq;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= coef * ref[i];
  if (guard == ProjectionGuard::always) return out;
  // Rounding can leave the result a hair on the conflicting side; push it
  // across so a second projection is an exact no-op.
  double push = 1.0;
  for (int round = 0; round < 64; ++round) {
    const double left = dot(out, ref);
    if (!(left < 0.0)) break;
    const double c = push * left / ref_sq;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * ref[i];
    push *= 2.0;
  }
  return out;
}

struct ProjectionStats {
  std::size_t pairs = 0;        // (reference, other) pairs examined
  std::size_t conflicts = 0;    // pairs with G_ij . G_ii < 0
  std::size_t projections = 0;  // pairs actually modified
  // Smallest G'_ij . G_ii over all examined pairs after projection.
  double min_post_dot = std::numeric_limits<double>::infinity();
  // Sum over tasks of the squared norm of each task's (possibly projected)
  // contribution to the combined gradient.
  double contribution_sq_norm = 0.0;

  void merge(const ProjectionStats& o) {
    pairs += o.pairs;
    conflicts += o.conflicts;
    projections += o.projections;
    if (o.min_post_dot < min_post_dot) min_post_dot = o.min_post_dot;
    contribution_sq_norm += o.contribution_sq_norm;
  }
};

/// A slice of a parameter vector whose top-priority task is `owner`.
struct ProjectionBlock {
  std::size_t owner = 0;
  std::vector<std::size_t> indices;
};

/// Combines per-task gradients of one parameter vector block by block.
/// Inside each block the other tasks' slices are projected against the
/// owner's slice (always the owner's original gradient) and the results
/// summed. Indices in no block take the plain sum. Tasks are always
/// accumulated in index order, so a call in which nothing is projected
/// reproduces plain_sum() bit for bit.
inline std::vector<double> blockwise_projected_sum(std::span<const std::vector<double>> task_grads,
                                                   const std::vector<ProjectionBlock>& blocks,
                                                   ProjectionGuard guard = ProjectionGuard::conflicting_only,
                                                   ProjectionStats* stats = nullptr) {
  if (task_grads.empty()) throw DimensionError("projected sum needs at least one task");
  const std::size_t n = task_grads[0].size();
  for (const auto& g : task_grads) {
    if (g.size() != n) throw DimensionError("projected sum: task gradients differ in length");
  }
  const std::size_t k = task_grads.size();

  // contribution[j] starts as task j's raw gradient; block slices are
  // overwritten with their projected versions.
  std::vector<std::vector<double>> contribution(task_grads.begin(), task_grads.end());
  std::vector<bool> covered(n, false);
  ProjectionStats local;
  std::vector<double> ref, other;
  for (const ProjectionBlock& block : blocks) {
    const auto& idx = block.indices;
    if (block.owner >= k) throw DimensionError("projection block owner is not a task");
    if (idx.empty()) continue;
    ref.resize(idx.size());
    other.resize(idx.size());
    for (std::size_t m = 0; m < idx.size(); ++m) {
      if (idx[m] >= n) throw DimensionError("projection block index out of range");
      if (covered[idx[m]]) throw InvariantError("index " + std::to_string(idx[m]) + " in more than one block");
      covered[idx[m]] = true;
      ref[m] = task_grads[block.owner][idx[m]];
    }
    local.contribution_sq_norm += squared_norm(ref);
    for (std::size_t j = 0; j < k; ++j) {
      if (j == block.owner) continue;
      for (std::size_t m = 0; m < idx.size(); ++m) other[m] = task_grads[j][idx[m]];
      const double before = dot(other, ref);
      ++local.pairs;
      if (before < 0.0) ++local.conflicts;
      std::vector<double> projected = project_gradient(other, ref, guard);
      bool changed = false;
      for (std::size_t m = 0; m < idx.size(); ++m) {
        if (projected[m] != other[m]) changed = true;
        contribution[j][idx[m]] = projected[m];
      }
      if (changed) ++local.projections;
      const double after = dot(projected, ref);
      if (after < local.min_post_dot) local.min_post_dot = after;
      local.contribution_sq_norm += squared_norm(projected);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (covered[i]) continue;
    for (std::size_t j = 0; j < k; ++j) local.contribution_sq_norm += task_grads[j][i] * task_grads[j][i];
  }

  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += contribution[j][i];
    out[i] = acc;
  }
  if (stats) stats->merge(local);
  return out;
}

/// One block per task: `groups[i]` lists the flat indices whose
/// top-priority task is i.
inline std::vector<double> grouped_projected_sum(std::span<const std::vector<double>> task_grads,
                                                 const std::vector<std::vector<std::size_t>>& groups,
                                                 ProjectionGuard guard = ProjectionGuard::conflicting_only,
                                                 ProjectionStats* stats = nullptr) {
  if (groups.size() > task_grads.size()) throw DimensionError("more channel groups than tasks");
  std::vector<ProjectionBlock> blocks;
  for (std::size_t i = 0; i < groups.size(); ++i) blocks.push_back({i, groups[i]});
  return blockwise_projected_sum(task_grads, blocks, guard, stats);
}

/// Elementwise sum over tasks, accumulated in task order.
inline std::vector<double> plain_sum(std::span<const std::vector<double>> task_grads) {
  if (task_grads.empty()) throw DimensionError("plain_sum needs at least one task");
  const std::size_t n = task_grads[0].size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (const auto& g : task_grads) acc += g.at(i);
    out[i] = acc;
  }
  return out;
}

/// Flat indices of the given out-channels of a [Cout, ...] tensor.
inline std::vector<std::size_t> channel_slice_indices(const std::vector<std::size_t>& channels,
                                                      std::size_t per_channel) {
  std::vector<std::size_t> out;
  out.reserve(channels.size() * per_channel);
  for (std::size_t p : channels)
    for (std::size_t m = 0; m < per_channel; ++m) out.push_back(p * per_channel + m);
  return out;
}

}  // namespace csmtl
