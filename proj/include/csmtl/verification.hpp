#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "csmtl/evaluation.hpp"
#include "csmtl/gradcheck.hpp"
#include "csmtl/loss_scaling.hpp"
#include "csmtl/optimizers.hpp"
#include "csmtl/oracles.hpp"
#include "csmtl/projection.hpp"
#include "csmtl/quadratic.hpp"
#include "csmtl/strength.hpp"
#include "csmtl/synthetic.hpp"

namespace csmtl {

/// One named check: pass flag, a one-line quantitative summary and the
/// wall time it took.
struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <class F>
CheckResult timed(const std::string& name, F body) {
  const auto start = std::chrono::steady_clock::now();
  CheckResult r = body();
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(y * R) for a fixed random R of y's shape.
inline Var linear_functional(Tape& t, Var y, Rng& rng) {
  Tensor r = random_tensor(t.value(y).shape(), rng);
  return sum(t, mul(t, y, t.constant(std::move(r))));
}

}  // namespace detail

struct OperatorCheck {
  std::string op;
  std::size_t cases = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

/// Each operator in isolation under a random linear functional, compared
/// against central differences on every input entry.
inline std::vector<OperatorCheck> operator_gradient_suite(std::size_t cases, std::uint64_t seed) {
  using Build = std::function<GradCheckResult(Rng&)>;
  auto run = [](std::vector<Tensor*> params, auto op, Rng& rng) {
    const std::uint64_t fseed = rng.next_u64();
    return gradient_check(params, [&, fseed](Tape& t, const std::vector<Var>& v) {
      Rng frng(fseed);
      return detail::linear_functional(t, op(t, v), frng);
    });
  };
  std::vector<std::pair<std::string, Build>> ops;
  ops.emplace_back("conv2d", [&](Rng& rng) {
    std::size_t n, cin, cout, h, w, k, s, p;
    do {
      n = 1 + rng.below(2), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
      k = 1 + rng.below(3), s = 1 + rng.below(2), p = rng.below(2);
      h = k + rng.below(4), w = k + rng.below(4);
    } while ((h + 2 * p - k) % s != 0 || (w + 2 * p - k) % s != 0);
    Tensor x = detail::random_tensor({n, cin, h, w}, rng), wt = detail::random_tensor({cout, cin, k, k}, rng);
    return run({&x, &wt}, [&](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], s, p); }, rng);
  });
  ops.emplace_back("add_channel_bias", [&](Rng& rng) {
    const std::size_t c = 1 + rng.below(4);
    Tensor x = detail::random_tensor({1 + rng.below(2), c, 1 + rng.below(3), 1 + rng.below(3)}, rng);
    Tensor b = detail::random_tensor({c}, rng);
    return run({&x, &b}, [](Tape& t, const std::vector<Var>& v) { return add_channel_bias(t, v[0], v[1]); }, rng);
  });
  ops.emplace_back("relu", [&](Rng& rng) {
    Tensor x = detail::random_tensor({1 + rng.below(3), 1 + rng.below(5)}, rng);
    for (double& v : x.values())
      while (std::abs(v) < 1e-2) v = rng.uniform(-1.0, 1.0);
    return run({&x}, [](Tape& t, const std::vector<Var>& v) { return relu(t, v[0]); }, rng);
  });
  ops.emplace_back("matmul", [&](Rng& rng) {
    const std::size_t m = 1 + rng.below(4), kk = 1 + rng.below(4), n = 1 + rng.below(4);
    Tensor a = detail::random_tensor({m, kk}, rng), b = detail::random_tensor({kk, n}, rng);
    return run({&a, &b}, [](Tape& t, const std::vector<Var>& v) { return matmul(t, v[0], v[1]); }, rng);
  });
  ops.emplace_back("add", [&](Rng& rng) {
    const Shape s{1 + rng.below(3), 1 + rng.below(4)};
    Tensor a = detail::random_tensor(s, rng), b = detail::random_tensor(s, rng);
    return run({&a, &b}, [](Tape& t, const std::vector<Var>& v) { return add(t, v[0], v[1]); }, rng);
  });
  ops.emplace_back("mul", [&](Rng& rng) {
    const Shape s{1 + rng.below(3), 1 + rng.below(4)};
    Tensor a = detail::random_tensor(s, rng), b = detail::random_tensor(s, rng);
    return run({&a, &b}, [](Tape& t, const std::vector<Var>& v) { return mul(t, v[0], v[1]); }, rng);
  });
  ops.emplace_back("scale", [&](Rng& rng) {
    Tensor a = detail::random_tensor({1 + rng.below(6)}, rng);
    const double f = rng.uniform(-3.0, 3.0);
    return run({&a}, [f](Tape& t, const std::vector<Var>& v) { return scale(t, v[0], f); }, rng);
  });
  ops.emplace_back("exp", [&](Rng& rng) {
    Tensor a = detail::random_tensor({1 + rng.below(6)}, rng, -2.0, 2.0);
    return run({&a}, [](Tape& t, const std::vector<Var>& v) { return exp(t, v[0]); }, rng);
  });
  ops.emplace_back("sum", [&](Rng& rng) {
    Tensor a = detail::random_tensor({1 + rng.below(3), 1 + rng.below(4)}, rng);
    return run({&a}, [](Tape& t, const std::vector<Var>& v) { return sum(t, v[0]); }, rng);
  });
  ops.emplace_back("element", [&](Rng& rng) {
    const std::size_t n = 1 + rng.below(6), i = rng.below(n);
    Tensor a = detail::random_tensor({n}, rng);
    return run({&a}, [i](Tape& t, const std::vector<Var>& v) { return element(t, v[0], i); }, rng);
  });
  ops.emplace_back("add_all", [&](Rng& rng) {
    Tensor a = detail::random_tensor({1}, rng), b = detail::random_tensor({1}, rng), c = detail::random_tensor({1}, rng);
    return run({&a, &b, &c}, [](Tape& t, const std::vector<Var>& v) {
      const std::vector<Var> terms{element(t, v[0], 0), element(t, v[1], 0), element(t, v[2], 0)};
      return add_all(t, terms);
    }, rng);
  });
  ops.emplace_back("batch_norm", [&](Rng& rng) {
    const std::size_t c = 1 + rng.below(3);
    TaskBatchNorm bn(c, 1);
    Tensor x = detail::random_tensor({2 + rng.below(2), c, 1 + rng.below(3), 1 + rng.below(3)}, rng);
    BatchNormState& st = bn.state(0);
    st.gamma = detail::random_tensor({c}, rng, 0.5, 1.5);
    st.beta = detail::random_tensor({c}, rng);
    return run({&x, &st.gamma, &st.beta},
               [&bn](Tape& t, const std::vector<Var>& v) { return bn.forward(t, v[0], 0, BnMode::train, false); }, rng);
  });
  ops.emplace_back("mse_loss", [&](Rng& rng) {
    const Shape s{1 + rng.below(3), 1 + rng.below(4)};
    Tensor p = detail::random_tensor(s, rng), y = detail::random_tensor(s, rng);
    return run({&p}, [&y](Tape& t, const std::vector<Var>& v) { return mse_loss(t, v[0], y); }, rng);
  });
  ops.emplace_back("cross_entropy_loss", [&](Rng& rng) {
    const std::size_t n = 1 + rng.below(3), c = 2 + rng.below(3), hw = rng.below(2) ? 1 + rng.below(3) : 0;
    Tensor z = hw ? detail::random_tensor({n, c, hw, hw}, rng, -2, 2) : detail::random_tensor({n, c}, rng, -2, 2);
    std::vector<int> labels(n * (hw ? hw * hw : 1));
    for (int& l : labels) l = static_cast<int>(rng.below(c));
    return run({&z}, [&labels](Tape& t, const std::vector<Var>& v) { return cross_entropy_loss(t, v[0], labels); }, rng);
  });

  std::vector<OperatorCheck> out;
  for (auto& [name, build] : ops) {
    Rng rng = substream(seed, name);
    OperatorCheck oc{name, 0, 0.0, ""};
    for (std::size_t i = 0; i < cases; ++i) {
      GradCheckResult r = build(rng);
      ++oc.cases;
      if (r.max_rel_error >= oc.max_rel_error) {
        oc.max_rel_error = r.max_rel_error;
        oc.worst = "case " + std::to_string(i) + " " + r.worst;
      }
    }
    out.push_back(oc);
  }
  return out;
}

inline CheckResult check_gradient_exactness(std::size_t cases = 100, std::uint64_t seed = 1) {
  return detail::timed("gradient exactness", [&] {
    CheckResult r;
    const auto ops = operator_gradient_suite(cases, seed);
    double worst = 0.0;
    std::string worst_op;
    bool enough = true;
    for (const OperatorCheck& o : ops) {
      enough &= o.cases >= 100;
      if (o.max_rel_error >= worst) {
        worst = o.max_rel_error;
        worst_op = o.op;
      }
    }
    r.passed = enough && worst < 1e-4;
    r.detail = std::to_string(ops.size()) + " operators x " + std::to_string(cases) + " cases, max rel err " +
               detail::fmt("%.3g", worst) + " (" + worst_op + ") < 1e-4";
    return r;
  });
}

inline CheckResult check_strength_suite(std::size_t tables = 1000, std::uint64_t seed = 2) {
  return detail::timed("connection strength suite", [&] {
    CheckResult r;
    std::vector<std::string> failures;
    auto expect = [&](bool ok, const std::string& what) {
      if (!ok) failures.push_back(what);
    };
    auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
    expect(near(kernel_strength(Tensor(Shape{1, 1, 1, 1}, 3.0), 0, 0), 9.0), "single tap 3 -> 9");
    expect(near(kernel_strength(Tensor(Shape{1, 1, 2, 2}, 1.0), 0, 0), 1.0), "ones 2x2 -> 1");
    expect(near(kernel_strength(Tensor(Shape{2, 3, 3, 3}, 0.0), 1, 2), 0.0), "zero kernel -> 0");
    {
      Tensor w(Shape{1, 2, 1, 1}, {1.0, 2.0});
      BatchNormState bn(1);
      bn.gamma[0] = 2.0;
      bn.running_var[0] = 3.0;
      expect(near(channel_strength(w, bn, 1.0, 0), 5.0), "gamma 2, var 3, eps 1, sum 5 -> 5");
      bn.gamma[0] = 0.0;
      expect(channel_strength(w, bn, 1.0, 0) == 0.0, "zero gamma -> 0");
    }
    expect(near(normalized_strength({{4.2}})[0][0], 1.0), "single channel -> 1");
    {
      const StrengthTable n = normalized_strength({{1, 3}});
      expect(near(n[0][0], 0.25) && near(n[0][1], 0.75), "(1,3) -> (0.25,0.75)");
      const StrengthTable z = normalized_strength({{0, 0, 0}});
      expect(near(z[0][1], 1.0 / 3.0), "zero row -> uniform");
    }
    Rng rng(seed);
    std::size_t checked = 0;
    for (std::size_t trial = 0; trial < tables; ++trial) {
      const std::size_t k = 1 + rng.below(4), c = 1 + rng.below(12);
      StrengthTable raw(k, std::vector<double>(c));
      for (auto& row : raw)
        for (double& v : row) v = rng.uniform() < 0.1 ? 0.0 : rng.uniform(0.0, 5.0);
      const StrengthReport rep = make_strength_report("l", raw);
      for (const auto& row : rep.normalized) {
        double s = 0.0;
        for (double v : row) s += v;
        expect(std::abs(s - 1.0) <= 1e-12, "row sums to 1 (table " + std::to_string(trial) + ")");
      }
      expect(check_strength_report(rep).empty(), "report valid (table " + std::to_string(trial) + ")");
      StrengthTable scaled = raw;
      const std::size_t i = rng.below(k);
      const double f = std::exp(rng.uniform(-5.0, 5.0));
      for (double& v : scaled[i]) v *= f;
      expect(make_strength_report("l", scaled).groups == rep.groups, "groups invariant to row scaling (table " +
                                                                          std::to_string(trial) + ")");
      ++checked;
    }
    r.passed = failures.empty();
    r.detail = "hand examples to 1e-12, " + std::to_string(checked) + " random tables" +
               (failures.empty() ? "" : "; first failure: " + failures.front());
    return r;
  });
}

inline CheckResult check_projection_contract(std::size_t pairs = 10000, std::size_t models = 12, std::uint64_t seed = 3) {
  return detail::timed("projection contract", [&] {
    CheckResult r;
    Rng rng(seed);
    std::size_t idem_fail = 0, norm_fail = 0;
    for (std::size_t t = 0; t < pairs; ++t) {
      const std::size_t n = 1 + rng.below(16);
      std::vector<double> g(n), ref(n);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = rng.normal();
        ref[i] = rng.normal();
      }
      const auto p = project_gradient(g, ref);
      idem_fail += project_gradient(p, ref) != p;
      norm_fail += std::sqrt(squared_norm(p)) > std::sqrt(squared_norm(g)) + 1e-12;
    }
    double min_dot = std::numeric_limits<double>::infinity();
    std::size_t steps = 0, conflicts = 0;
    for (std::size_t m = 0; m < models; ++m) {
      const std::size_t w1 = 2 + rng.below(7), w2 = 2 + rng.below(7);
      ModelSpec spec;
      spec.trunk = {ConvSpec{3, w1, 3, 1, 1}, ConvSpec{w1, w2, 3, 1, 1}};
      spec.heads = {{ConvSpec{w2, 3, 1, 1, 0}}, {ConvSpec{w2, 1, 1, 1, 0}}};
      spec.tasks = {{"segmentation", LossKind::cross_entropy, 1.0}, {"depth", LossKind::mse, 1.0}};
      Model model(spec, rng.next_u64());
      for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t t = 0; t < 2; ++t)
          for (double& gmm : model.trunk_norm(l).state(t).gamma.values()) gmm = rng.uniform(0.3, 2.0);
      SyntheticConfig dc;
      dc.batch_size = 4;
      dc.height = dc.width = 6;
      SyntheticDataset data(dc, rng.next_u64());
      OptimizerConfig oc;
      oc.learning_rate = 0.05;
      MultiTaskOptimizer opt(model, oc);
      const double a = rng.uniform(0.2, 0.8);
      const std::vector<double> w{a, 1.0 - a};
      for (std::size_t s = 0; s < 4; ++s) {
        StepReport rep = opt.phase2_step(data.batch(s).as_batch(), strength_snapshot(model), w);
        for (const LayerProjectionLog& l : rep.layers) {
          conflicts += l.conflicts;
          if (l.pairs > 0) min_dot = std::min(min_dot, l.min_post_dot);
        }
        ++steps;
      }
    }
    r.passed = idem_fail == 0 && norm_fail == 0 && min_dot >= -1e-12;
    r.detail = std::to_string(pairs) + " pairs: " + std::to_string(idem_fail) + " idempotence, " +
               std::to_string(norm_fail) + " norm failures; " + std::to_string(steps) + " phase-2 steps (" +
               std::to_string(conflicts) + " conflicts), min post dot " + detail::fmt("%.3g", min_dot) + " >= -1e-12";
    return r;
  });
}

inline CheckResult check_theorem1(std::size_t instances = 1000, std::uint64_t seed = 2025) {
  return detail::timed("priority-step inequality monte carlo", [&] {
    CheckResult r;
    Rng rng(seed);
    std::size_t holds = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      const std::size_t dim = 1 + rng.below(8), k = 2 + rng.below(3);
      QuadraticProblem p = make_quadratic_problem(dim, k, 1.0, rng.next_u64());
      Eigen::VectorXd theta(static_cast<Eigen::Index>(dim));
      for (Eigen::Index j = 0; j < theta.size(); ++j) theta(j) = rng.normal();
      std::vector<double> w(k);
      double total = 0.0;
      for (double& v : w) total += v = rng.uniform(0.5, 1.5);
      for (double& v : w) v /= total;
      holds += theorem1_check(p, w, 1e-3, theta).holds;
    }
    const double rate = static_cast<double>(holds) / static_cast<double>(instances);
    r.passed = rate >= 0.99;
    r.detail = std::to_string(holds) + "/" + std::to_string(instances) + " hold (" + detail::fmt("%.1f", 100 * rate) +
               "% >= 99%), eta 1e-3, tol 1e-10";
    return r;
  });
}

struct ConvergenceSummary {
  std::size_t instances = 0;
  std::size_t reached = 0;        // functional < 1e-6 within the budget
  std::size_t decay_ok = 0;       // fitted exponent <= -0.9
  double worst_exponent = -std::numeric_limits<double>::infinity();
  std::size_t worst_first = 0;    // latest first-hit iteration
  std::size_t diverged = 0;
};

/// 2-4 task conflicting quadratics, dim 2-8, eta = 1/H, equal weights.
inline ConvergenceSummary convergence_suite(std::size_t instances, std::size_t max_iters, ProjectionGuard guard,
                                            bool per_coordinate, std::uint64_t seed) {
  ConvergenceSummary s;
  Rng rng(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t k = 2 + rng.below(3), dim = 2 + rng.below(7);
    QuadraticProblem p = make_quadratic_problem(dim, k, 1.0, rng.next_u64());
    ProbeOptions o;
    o.eta = 1.0 / p.lipschitz();
    o.max_iters = max_iters;
    o.guard = guard;
    o.per_coordinate_blocks = per_coordinate;
    ++s.instances;
    try {
      ProbeResult r = convergence_probe(p, o);
      const std::size_t first = r.first_below(1e-6);
      if (first < r.trace.size()) {
        ++s.reached;
        s.worst_first = std::max(s.worst_first, first);
      }
      double e = std::numeric_limits<double>::infinity();
      try {
        e = fitted_decay_exponent(r.min_prefix);
      } catch (const DataError&) {
        // trace shorter than the fit window
      }
      s.decay_ok += e <= -0.9;
      s.worst_exponent = std::max(s.worst_exponent, e);
    } catch (const NumericError&) {
      ++s.diverged;
    }
  }
  return s;
}

inline CheckResult check_convergence(std::size_t instances = 100, std::size_t max_iters = 100000, std::uint64_t seed = 55) {
  return detail::timed("convex quadratic convergence", [&] {
    CheckResult r;
    const ConvergenceSummary s = convergence_suite(instances, max_iters, ProjectionGuard::always, true, seed);
    r.passed = s.reached == s.instances && s.decay_ok == s.instances;
    r.detail = std::to_string(s.reached) + "/" + std::to_string(s.instances) + " below 1e-6 (latest at iter " +
               std::to_string(s.worst_first) + "), worst decay exponent " + detail::fmt("%.3g", s.worst_exponent) +
               " <= -0.9";
    return r;
  });
}

/// Same instances under group-level projection guarded by conflict, the
/// Phase-2 rule the optimizer applies to conv layers. Reported only.
inline CheckResult check_guarded_convergence(std::size_t instances = 100, std::size_t max_iters = 100000,
                                             std::uint64_t seed = 55) {
  return detail::timed("guarded group projection (informational)", [&] {
    CheckResult r;
    const ConvergenceSummary s =
        convergence_suite(instances, max_iters, ProjectionGuard::conflicting_only, false, seed);
    r.passed = s.reached == s.instances;
    r.detail = std::to_string(s.reached) + "/" + std::to_string(s.instances) + " below 1e-6, " +
               std::to_string(s.decay_ok) + " with exponent <= -0.9, " + std::to_string(s.diverged) + " diverged";
    return r;
  });
}

inline CheckResult check_phase_mixing(std::size_t draws = 100000, std::uint64_t seed = 6) {
  return detail::timed("phase mixing statistics", [&] {
    CheckResult r;
    r.passed = true;
    const std::size_t e_total = 4;
    for (std::size_t e = 0; e <= e_total; ++e) {
      Rng rng = substream(seed, "phase-" + std::to_string(e));
      std::size_t ones = 0;
      for (std::size_t i = 0; i < draws; ++i) ones += select_phase(e, e_total, rng) == Phase::phase1;
      const double expected = 1.0 - static_cast<double>(e) / static_cast<double>(e_total);
      const double freq = static_cast<double>(ones) / static_cast<double>(draws);
      const double sigma = std::sqrt(expected * (1.0 - expected) / static_cast<double>(draws));
      const bool ok = std::abs(freq - expected) <= 3.0 * sigma;
      r.passed &= ok;
      r.detail += (e ? ", " : "") + detail::fmt("e/E=%.2f", static_cast<double>(e) / e_total) + detail::fmt(" f=%.4f", freq);
    }
    r.detail += " (" + std::to_string(draws) + " draws each, within 3 sigma)";
    return r;
  });
}

inline CheckResult check_loss_scaling(std::uint64_t seed = 9) {
  return detail::timed("loss scaling suite", [&] {
    CheckResult r;
    Rng rng(seed);
    double worst_sum = 0.0, worst_const = 0.0;
    DwaState dwa;
    for (int epoch = 0; epoch < 1000; ++epoch) {
      const std::size_t k = 4;
      std::vector<double> l(k);
      for (double& v : l) v = std::exp(rng.uniform(-5.0, 5.0));
      const auto w = dwa_weights(dwa, k);
      double s = 0.0;
      for (double v : w) s += v;
      worst_sum = std::max(worst_sum, std::abs(s - 4.0));
      dwa.record(l);
    }
    DwaState flat;
    for (int epoch = 0; epoch < 10; ++epoch) {
      for (double v : dwa_weights(flat, 3)) worst_const = std::max(worst_const, std::abs(v - 1.0));
      flat.record(std::vector<double>{0.7, 2.0, 5.0});
    }
    double worst_fd = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
      UncertaintyState s({TaskKind::regression, TaskKind::classification});
      s.rho[0] = rng.uniform(-3.0, 3.0);
      s.rho[1] = rng.uniform(-3.0, 3.0);
      Tensor losses(Shape{2});
      losses[0] = rng.uniform(0.01, 5.0);
      losses[1] = rng.uniform(0.01, 5.0);
      GradCheckResult g = gradient_check({&s.rho, &losses}, [&s](Tape& t, const std::vector<Var>& v) {
        const std::vector<Var> parts{element(t, v[1], 0), element(t, v[1], 1)};
        return uncertainty_weighted_loss(t, parts, s);
      });
      worst_fd = std::max(worst_fd, g.max_rel_error);
    }
    const std::vector<double> ratios{1.0, 1.0, 10.0, 50.0};
    const bool verbatim = static_weights(ScalingScheme::manual, ratios, 4) == ratios;
    r.passed = worst_sum <= 1e-9 && worst_const <= 1e-12 && worst_fd < 1e-6 && verbatim;
    r.detail = "dwa |sum-K| " + detail::fmt("%.2g", worst_sum) + ", constant-loss deviation " +
               detail::fmt("%.2g", worst_const) + ", uncertainty fd rel err " + detail::fmt("%.2g", worst_fd) +
               " (100 draws), manual ratios " + (verbatim ? "verbatim" : "altered");
    return r;
  });
}

/// The oracle suite behind `verify`.
inline std::vector<CheckResult> run_oracle_suite(bool include_informational = true) {
  std::vector<CheckResult> out;
  out.push_back(check_gradient_exactness());
  out.push_back(check_strength_suite());
  out.push_back(check_projection_contract());
  out.push_back(check_theorem1());
  out.push_back(check_convergence());
  out.push_back(check_phase_mixing());
  out.push_back(check_loss_scaling());
  if (include_informational) out.push_back(check_guarded_convergence());
  return out;
}

}  // namespace csmtl
