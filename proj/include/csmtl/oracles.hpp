#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/network.hpp"
#include "csmtl/projection.hpp"
#include "csmtl/quadratic.hpp"

namespace csmtl {

inline constexpr double kPriorityTieTolerance = 1e-12;

enum class PriorityVerdict { first, second, tie };

namespace detail {

inline Eigen::VectorXd step_subset(const Eigen::VectorXd& theta, const std::vector<std::size_t>& subset,
                                   const Eigen::VectorXd& g, double eta) {
  Eigen::VectorXd out = theta;
  for (std::size_t c : subset) {
    if (c >= static_cast<std::size_t>(theta.size())) throw DimensionError("priority subset index out of range");
    const auto i = static_cast<Eigen::Index>(c);
    out(i) -= eta * g(i);
  }
  return out;
}

}  // namespace detail

/// Multi-task loss sum_i w_i L_i after stepping only the coordinates in
/// `subset` along task m's unweighted gradient.
inline double loss_after_priority_step(const QuadraticProblem& problem, const std::vector<std::size_t>& subset,
                                       std::size_t m, const std::vector<double>& w, double eta,
                                       const Eigen::VectorXd& theta) {
  return problem.weighted_loss(w, detail::step_subset(theta, subset, problem.gradient(m, theta), eta));
}

/// Which of tasks m and n holds priority on `subset`: the one whose step
/// leaves the smaller multi-task loss.
inline PriorityVerdict priority_oracle(const QuadraticProblem& problem, const std::vector<std::size_t>& subset,
                                       std::size_t m, std::size_t n, const std::vector<double>& w, double eta,
                                       const Eigen::VectorXd& theta) {
  if (subset.empty()) throw ConfigError("priority subset must be nonempty");
  if (m >= problem.num_tasks() || n >= problem.num_tasks()) throw LookupError("priority oracle: unknown task");
  if (m == n) return PriorityVerdict::tie;
  const double lm = loss_after_priority_step(problem, subset, m, w, eta, theta);
  const double ln = loss_after_priority_step(problem, subset, n, w, eta, theta);
  if (std::abs(lm - ln) < kPriorityTieTolerance) return PriorityVerdict::tie;
  return lm < ln ? PriorityVerdict::first : PriorityVerdict::second;
}

/// Task with priority over every other task on `subset`; near-ties within
/// the tie tolerance go to the lower index.
inline std::size_t priority_task(const QuadraticProblem& problem, const std::vector<std::size_t>& subset,
                                 const std::vector<double>& w, double eta, const Eigen::VectorXd& theta) {
  if (subset.empty()) throw ConfigError("priority subset must be nonempty");
  std::size_t best = 0;
  double best_loss = loss_after_priority_step(problem, subset, 0, w, eta, theta);
  for (std::size_t m = 1; m < problem.num_tasks(); ++m) {
    const double l = loss_after_priority_step(problem, subset, m, w, eta, theta);
    if (l < best_loss - kPriorityTieTolerance) {
      best = m;
      best_loss = l;
    }
  }
  return best;
}

/// Priority task of each single coordinate.
inline std::vector<std::size_t> coordinate_priorities(const QuadraticProblem& problem, const std::vector<double>& w,
                                                      double eta, const Eigen::VectorXd& theta) {
  std::vector<std::size_t> out(problem.dim());
  for (std::size_t c = 0; c < problem.dim(); ++c) out[c] = priority_task(problem, {c}, w, eta, theta);
  return out;
}

struct Theorem1Result {
  double loss_priority = 0.0;
  double loss_sum = 0.0;
  bool holds = false;
  std::vector<std::size_t> blocks_owner;  // priority task per coordinate
};

inline constexpr double kTheorem1Tolerance = 1e-10;

/// Compares (a) stepping every coordinate along its priority task's
/// gradient with (b) stepping everything along sum_i w_i g_i.
inline Theorem1Result theorem1_check(const QuadraticProblem& problem, const std::vector<double>& w, double eta,
                                     const Eigen::VectorXd& theta) {
  problem.check_weights(w);
  if (static_cast<std::size_t>(theta.size()) != problem.dim()) throw DimensionError("theorem1_check: theta size");
  Theorem1Result r;
  r.blocks_owner = coordinate_priorities(problem, w, eta, theta);
  std::vector<Eigen::VectorXd> g;
  for (std::size_t i = 0; i < problem.num_tasks(); ++i) g.push_back(problem.gradient(i, theta));
  Eigen::VectorXd prio = theta;
  Eigen::VectorXd combined = Eigen::VectorXd::Zero(theta.size());
  for (std::size_t i = 0; i < problem.num_tasks(); ++i) combined += w[i] * g[i];
  for (std::size_t c = 0; c < problem.dim(); ++c) {
    const auto ci = static_cast<Eigen::Index>(c);
    prio(ci) -= eta * g[r.blocks_owner[c]](ci);
  }
  r.loss_priority = problem.weighted_loss(w, prio);
  r.loss_sum = problem.weighted_loss(w, theta - eta * combined);
  r.holds = r.loss_priority <= r.loss_sum + kTheorem1Tolerance;
  return r;
}

enum class ProbeMethod { phase2, gd };

struct ProbeOptions {
  ProbeMethod method = ProbeMethod::phase2;
  std::optional<double> eta;  // unset selects 1/(H max w)
  std::size_t max_iters = 10000;
  std::vector<double> weights;  // empty selects 1/K each
  ProjectionGuard guard = ProjectionGuard::always;
  // true: every coordinate is its own block; false: one block per task
  // holding all coordinates that task owns.
  bool per_coordinate_blocks = true;
  double oracle_eta = 1e-3;  // step used to assign coordinate priorities at theta0
  Eigen::VectorXd theta0;    // empty selects zeros
};

struct ProbeResult {
  std::vector<double> trace;       // functional at iterations 0, 1, ...
  std::vector<double> min_prefix;  // running minimum of trace
  double eta = 0.0;
  double eta_bound = 0.0;
  bool eta_above_bound = false;
  std::string warning;
  std::vector<std::size_t> owners;  // coordinate priorities used for blocks
  Eigen::VectorXd theta;            // final iterate

  /// First iteration whose functional is below `threshold`, or trace size.
  std::size_t first_below(double threshold) const {
    for (std::size_t t = 0; t < trace.size(); ++t)
      if (trace[t] < threshold) return t;
    return trace.size();
  }
};

/// Iterates the chosen update on a quadratic problem and records the
/// gradient-norm functional. For gd it is sum_k w_k^2 ||g_k||^2. For
/// phase2 each task's weighted gradient is first projected inside the
/// priority blocks (fixed from the oracle at theta0) and the functional
/// sums the squared norms of those contributions.
inline ProbeResult convergence_probe(const QuadraticProblem& problem, ProbeOptions opt) {
  const std::size_t k = problem.num_tasks();
  const std::size_t n = problem.dim();
  if (opt.weights.empty()) opt.weights.assign(k, 1.0 / static_cast<double>(k));
  problem.check_weights(opt.weights);
  const double wmax = *std::max_element(opt.weights.begin(), opt.weights.end());
  if (!(wmax > 0.0)) throw ConfigError("convergence probe needs a positive weight");

  ProbeResult r;
  r.eta_bound = 1.0 / (problem.lipschitz() * wmax);
  r.eta = opt.eta.value_or(r.eta_bound);
  if (!(r.eta >= 0.0)) throw ConfigError("convergence probe step must be nonnegative");
  if (r.eta > r.eta_bound * (1.0 + 1e-12)) {
    r.eta_above_bound = true;
    r.warning = "step " + std::to_string(r.eta) + " exceeds the bound " + std::to_string(r.eta_bound);
  }

  Eigen::VectorXd theta = opt.theta0.size() == 0 ? Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n)) : opt.theta0;
  if (static_cast<std::size_t>(theta.size()) != n) throw DimensionError("convergence probe: theta0 size");

  std::vector<ProjectionBlock> blocks;
  if (opt.method == ProbeMethod::phase2) {
    r.owners = coordinate_priorities(problem, opt.weights, opt.oracle_eta, theta);
    if (opt.per_coordinate_blocks) {
      for (std::size_t c = 0; c < n; ++c) blocks.push_back({r.owners[c], {c}});
    } else {
      for (std::size_t i = 0; i < k; ++i) {
        ProjectionBlock b{i, {}};
        for (std::size_t c = 0; c < n; ++c)
          if (r.owners[c] == i) b.indices.push_back(c);
        blocks.push_back(std::move(b));
      }
    }
  }

  std::vector<std::vector<double>> weighted(k, std::vector<double>(n));
  double best = std::numeric_limits<double>::infinity();
  r.trace.reserve(opt.max_iters);
  r.min_prefix.reserve(opt.max_iters);
  for (std::size_t t = 0; t < opt.max_iters; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      const Eigen::VectorXd g = problem.gradient(i, theta);
      for (std::size_t c = 0; c < n; ++c) weighted[i][c] = opt.weights[i] * g(static_cast<Eigen::Index>(c));
    }
    std::vector<double> update;
    double functional = 0.0;
    if (opt.method == ProbeMethod::phase2) {
      ProjectionStats stats;
      update = blockwise_projected_sum(weighted, blocks, opt.guard, &stats);
      functional = stats.contribution_sq_norm;
    } else {
      update = plain_sum(weighted);
      for (const auto& g : weighted) functional += squared_norm(g);
    }
    if (!std::isfinite(functional)) throw NumericError("convergence probe diverged at iteration " + std::to_string(t));
    best = std::min(best, functional);
    r.trace.push_back(functional);
    r.min_prefix.push_back(best);
    for (std::size_t c = 0; c < n; ++c) theta(static_cast<Eigen::Index>(c)) -= r.eta * update[c];
  }
  r.theta = theta;
  return r;
}

inline constexpr double kDecayFloor = 1e-24;

/// Least-squares slope of log(min_prefix(T)) against log T over
/// log-spaced T in [t_lo, t_hi]. Points at or below kDecayFloor carry no
/// rate information and are dropped; when fewer than three remain the
/// sequence fell below the floor inside the window and the result is -inf.
inline double fitted_decay_exponent(const std::vector<double>& min_prefix, double t_lo = 1e2, double t_hi = 1e4) {
  if (min_prefix.empty()) throw DataError("decay fit needs a nonempty trace");
  t_hi = std::min(t_hi, static_cast<double>(min_prefix.size()));
  if (!(t_hi > t_lo)) throw DataError("decay fit window is empty");
  constexpr int kPoints = 41;
  std::vector<double> xs, ys;
  std::size_t last = 0;
  for (int p = 0; p < kPoints; ++p) {
    const double frac = static_cast<double>(p) / (kPoints - 1);
    const auto t = static_cast<std::size_t>(std::llround(t_lo * std::pow(t_hi / t_lo, frac)));
    if (t == last || t == 0 || t > min_prefix.size()) continue;
    last = t;
    const double v = min_prefix[t - 1];
    if (!(v > kDecayFloor)) continue;
    xs.push_back(std::log(static_cast<double>(t)));
    ys.push_back(std::log(v));
  }
  if (xs.size() < 3) return -std::numeric_limits<double>::infinity();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

/// Per-channel priority on a trunk conv layer of a model: for each
/// out-channel slice and each task m, steps only that slice along task m's
/// unweighted gradient and evaluates sum_i w_i L_i with batch statistics
/// (running estimates untouched). Returns the winning task per channel.
inline std::vector<std::size_t> model_channel_priorities(Model& model, const Batch& batch, std::size_t layer,
                                                         const std::vector<double>& w, double eta) {
  const std::size_t k = model.num_tasks();
  if (w.size() != k) throw DimensionError("model priority oracle: weight count");
  Tensor& weight = model.trunk_layer(layer).weight;
  const std::string name = Model::trunk_weight_name(layer);
  std::vector<std::vector<double>> g(k);
  for (std::size_t t = 0; t < k; ++t)
    g[t] = per_task_gradients(model, batch, t, 1.0, BnMode::train, /*update_running=*/false).shared.at(name);
  model.zero_grad();
  const std::size_t cout = weight.dim(0);
  const std::size_t per_channel = weight.size() / cout;
  const std::vector<double> original = weight.values();
  auto multi_loss = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += w[i] * task_loss(model, batch, i, BnMode::train);
    return total;
  };
  std::vector<std::size_t> out(cout, 0);
  for (std::size_t p = 0; p < cout; ++p) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < k; ++m) {
      for (std::size_t j = p * per_channel; j < (p + 1) * per_channel; ++j) weight[j] = original[j] - eta * g[m][j];
      const double l = multi_loss();
      for (std::size_t j = p * per_channel; j < (p + 1) * per_channel; ++j) weight[j] = original[j];
      if (l < best - kPriorityTieTolerance) {
        best = l;
        out[p] = m;
      }
    }
  }
  return out;
}

}  // namespace csmtl
