#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/network.hpp"
#include "csmtl/strength.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

struct MetricEntry {
  std::string name;
  bool lower_is_better = true;
  double baseline = 0.0;
};

struct MetricSpec {
  std::vector<MetricEntry> metrics;

  void validate() const {
    for (const MetricEntry& m : metrics) {
      if (!std::isfinite(m.baseline)) throw ConfigError("baseline for '" + m.name + "' is not finite");
      if (m.baseline == 0.0) throw DataError("baseline for '" + m.name + "' is zero; the relative change is undefined");
    }
  }
};

/// Mean signed relative improvement over the baselines, as a fraction:
/// (1/T) sum_i (-1)^{l_i} (M_i - B_i) / B_i with l_i = 1 for lower-better.
inline double delta_m(std::span<const double> model_metrics, const MetricSpec& spec) {
  if (model_metrics.size() != spec.metrics.size()) {
    throw DimensionError("delta_m: " + std::to_string(model_metrics.size()) + " metrics for " +
                         std::to_string(spec.metrics.size()) + " baselines");
  }
  if (spec.metrics.empty()) throw DimensionError("delta_m needs at least one metric");
  spec.validate();
  double total = 0.0;
  for (std::size_t i = 0; i < model_metrics.size(); ++i) {
    const MetricEntry& m = spec.metrics[i];
    const double rel = (model_metrics[i] - m.baseline) / m.baseline;
    total += m.lower_is_better ? -rel : rel;
  }
  return total / static_cast<double>(model_metrics.size());
}

/// Pearson correlation of first differences of per-epoch losses, for every
/// task pair. `curves[task][epoch]`. A pair with a zero-variance delta
/// series correlates 0; the diagonal is 1.
inline std::vector<std::vector<double>> loss_trend_correlation(const std::vector<std::vector<double>>& curves) {
  const std::size_t k = curves.size();
  if (k == 0) return {};
  const std::size_t epochs = curves.front().size();
  for (const auto& c : curves) {
    if (c.size() != epochs) throw DimensionError("loss curves differ in length");
  }
  if (epochs < 3) throw DataError("loss trend correlation needs at least 3 epochs, got " + std::to_string(epochs));
  const std::size_t n = epochs - 1;
  std::vector<std::vector<double>> centered(k, std::vector<double>(n));
  std::vector<double> norm(k, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    double mean = 0.0;
    for (std::size_t e = 0; e < n; ++e) {
      centered[t][e] = curves[t][e + 1] - curves[t][e];
      mean += centered[t][e];
    }
    mean /= static_cast<double>(n);
    for (double& d : centered[t]) d -= mean;
    norm[t] = std::sqrt(squared_norm(centered[t]));
  }
  std::vector<std::vector<double>> out(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a) {
    out[a][a] = 1.0;
    for (std::size_t b = a + 1; b < k; ++b) {
      double r = 0.0;
      if (norm[a] > 0.0 && norm[b] > 0.0) {
        r = dot(centered[a], centered[b]) / (norm[a] * norm[b]);
        r = std::max(-1.0, std::min(1.0, r));
      }
      out[a][b] = out[b][a] = r;
    }
  }
  return out;
}

/// |CG_i| / N_O per task.
inline std::vector<double> priority_share(const StrengthReport& report) {
  const std::size_t channels = report.num_channels();
  std::vector<double> out(report.groups.size(), 0.0);
  if (channels == 0) return out;
  for (std::size_t i = 0; i < report.groups.size(); ++i) {
    out[i] = static_cast<double>(report.groups[i].size()) / static_cast<double>(channels);
  }
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(squared_norm(a)), nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

/// Mean cosine over task pairs of the unweighted shared gradients at the
/// current parameters. Batch statistics are used but the running estimates
/// stay untouched.
inline double mean_pairwise_cosine(Model& model, const Batch& batch) {
  const std::size_t k = model.num_tasks();
  if (k < 2) return 1.0;
  std::vector<std::vector<double>> flat(k);
  ParameterPartition part = model.partition();
  for (std::size_t t = 0; t < k; ++t) {
    TaskGradients tg = per_task_gradients(model, batch, t, 1.0, BnMode::train, /*update_running=*/false);
    for (const NamedParam& p : part.shared) {
      const auto& g = tg.shared.at(p.name);
      flat[t].insert(flat[t].end(), g.begin(), g.end());
    }
  }
  model.zero_grad();
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a + 1; b < k; ++b) {
      total += cosine_similarity(flat[a], flat[b]);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

}  // namespace csmtl
