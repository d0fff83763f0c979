#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/ops.hpp"
#include "csmtl/tape.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

enum class ScalingScheme { equal, manual, uncertainty, dwa };

inline const char* scaling_name(ScalingScheme s) {
  switch (s) {
    case ScalingScheme::equal: return "equal";
    case ScalingScheme::manual: return "manual";
    case ScalingScheme::uncertainty: return "uncertainty";
    case ScalingScheme::dwa: return "dwa";
  }
  return "?";
}

inline ScalingScheme parse_scaling(const std::string& s) {
  if (s == "equal") return ScalingScheme::equal;
  if (s == "manual") return ScalingScheme::manual;
  if (s == "uncertainty") return ScalingScheme::uncertainty;
  if (s == "dwa") return ScalingScheme::dwa;
  throw ConfigError("unknown loss scaling '" + s + "' (expected equal, manual, uncertainty or dwa)");
}

/// equal: 1/K each. manual: the ratios exactly as given.
inline std::vector<double> static_weights(ScalingScheme mode, const std::optional<std::vector<double>>& ratios,
                                          std::size_t num_tasks) {
  if (num_tasks == 0) throw ConfigError("static_weights needs at least one task");
  if (mode == ScalingScheme::equal) return std::vector<double>(num_tasks, 1.0 / static_cast<double>(num_tasks));
  if (mode != ScalingScheme::manual) throw ConfigError("static_weights handles only equal and manual modes");
  if (!ratios) throw ConfigError("manual loss scaling needs per-task ratios");
  if (ratios->size() != num_tasks) {
    throw ConfigError("manual loss scaling needs " + std::to_string(num_tasks) + " ratios, got " +
                      std::to_string(ratios->size()));
  }
  for (double r : *ratios) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("manual ratios must be finite and nonnegative");
  }
  return *ratios;
}

enum class TaskKind { regression, classification };

inline TaskKind task_kind_for(LossKind loss) {
  return loss == LossKind::cross_entropy ? TaskKind::classification : TaskKind::regression;
}

/// Per-task log-variance rho = log sigma^2.
struct UncertaintyState {
  Tensor rho;
  std::vector<TaskKind> kinds;

  UncertaintyState() = default;
  explicit UncertaintyState(std::vector<TaskKind> k) : rho(Shape{k.size()}, 0.0), kinds(std::move(k)) {
    if (kinds.empty()) throw ConfigError("uncertainty weighting needs at least one task");
  }

  std::size_t num_tasks() const { return kinds.size(); }
  double sigma_sq(std::size_t i) const { return std::exp(rho[i]); }
};

/// Multiplier applied to the raw loss: e^-rho / 2 for regression, e^-rho
/// for classification.
inline double uncertainty_loss_factor(TaskKind kind, double rho) {
  return kind == TaskKind::regression ? 0.5 * std::exp(-rho) : std::exp(-rho);
}

/// L/(2 sigma^2) + log sigma for regression, L/sigma^2 + log sigma for
/// classification, with log sigma = rho/2.
inline double uncertainty_term(double loss, double rho, TaskKind kind) {
  return uncertainty_loss_factor(kind, rho) * loss + 0.5 * rho;
}

inline double uncertainty_term_grad_rho(double loss, double rho, TaskKind kind) {
  return -uncertainty_loss_factor(kind, rho) * loss + 0.5;
}

inline double uncertainty_weighted_loss(std::span<const double> losses, const UncertaintyState& state) {
  if (losses.size() != state.num_tasks()) throw DimensionError("uncertainty weighting: loss count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) total += uncertainty_term(losses[i], state.rho[i], state.kinds[i]);
  return total;
}

/// Gradient of the total with respect to each rho.
inline std::vector<double> uncertainty_rho_gradient(std::span<const double> losses, const UncertaintyState& state) {
  if (losses.size() != state.num_tasks()) throw DimensionError("uncertainty weighting: loss count mismatch");
  std::vector<double> g(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) g[i] = uncertainty_term_grad_rho(losses[i], state.rho[i], state.kinds[i]);
  return g;
}

/// Tape form: the raw losses are scalar vars on `tape`, rho is registered
/// as a leaf so both the losses and rho receive gradients.
inline Var uncertainty_weighted_loss(Tape& tape, std::span<const Var> losses, UncertaintyState& state) {
  if (losses.size() != state.num_tasks()) throw DimensionError("uncertainty weighting: loss count mismatch");
  const Var rho = tape.leaf(state.rho);
  std::vector<Var> terms;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const Var r = element(tape, rho, i);
    const double c = state.kinds[i] == TaskKind::regression ? 0.5 : 1.0;
    const Var precision = exp(tape, scale(tape, r, -1.0));
    terms.push_back(add(tape, scale(tape, mul(tape, precision, losses[i]), c), scale(tape, r, 0.5)));
  }
  return add_all(tape, terms);
}

/// Last two epoch-mean losses per task and the temperature.
struct DwaState {
  double temperature = 2.0;
  std::vector<std::vector<double>> history;  // [epoch][task], only the tail matters

  void record(std::span<const double> epoch_losses) {
    history.emplace_back(epoch_losses.begin(), epoch_losses.end());
    if (history.size() > 2) history.erase(history.begin());
  }
};

/// K * softmax(r / T) with r_i = L_i(t-1) / L_i(t-2). Until two epochs of
/// history exist every weight is 1. A zero denominator gives r_i = 1.
inline std::vector<double> dwa_weights(const DwaState& state, std::size_t num_tasks) {
  if (num_tasks == 0) throw ConfigError("dwa needs at least one task");
  if (!(state.temperature > 0.0)) throw ConfigError("dwa temperature must be positive");
  if (state.history.size() < 2) return std::vector<double>(num_tasks, 1.0);
  const auto& prev = state.history[state.history.size() - 1];
  const auto& prev2 = state.history[state.history.size() - 2];
  if (prev.size() != num_tasks || prev2.size() != num_tasks) throw DimensionError("dwa history has the wrong task count");
  std::vector<double> r(num_tasks);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < num_tasks; ++i) {
    r[i] = prev2[i] == 0.0 ? 1.0 : prev[i] / prev2[i];
    r[i] /= state.temperature;
    top = std::max(top, r[i]);
  }
  double z = 0.0;
  for (double& v : r) {
    v = std::exp(v - top);
    z += v;
  }
  for (double& v : r) v = static_cast<double>(num_tasks) * v / z;
  return r;
}

}  // namespace csmtl
