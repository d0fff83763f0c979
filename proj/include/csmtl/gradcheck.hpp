#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "csmtl/tape.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

/// Builds a scalar loss from leaf vars registered for the given tensors.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param[i][j]: analytic a vs numeric n"
};

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double evaluate_loss(const std::vector<Tensor*>& params, const LossBuilder& build) {
  Tape tape;
  std::vector<Var> vars;
  for (Tensor* p : params) vars.push_back(tape.leaf(*p));
  return tape.value(build(tape, vars)).item();
}

/// Compares reverse-mode gradients with central differences of the given
/// step on every entry of every parameter.
inline GradCheckResult gradient_check(const std::vector<Tensor*>& params, const LossBuilder& build,
                                      double step = 1e-5) {
  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor* p : params) vars.push_back(tape.leaf(*p));
    tape.backward(build(tape, vars));
  }
  std::vector<std::vector<double>> analytic;
  for (Tensor* p : params) analytic.push_back(p->grad());

  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double saved = p[j];
      p[j] = saved + step;
      const double up = evaluate_loss(params, build);
      p[j] = saved - step;
      const double down = evaluate_loss(params, build);
      p[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i][j], numeric);
      ++r.checked;
      if (err >= r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = "param[" + std::to_string(i) + "][" + std::to_string(j) + "]: analytic " +
                  std::to_string(analytic[i][j]) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace csmtl
