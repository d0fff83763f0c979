#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/evaluation.hpp"
#include "csmtl/loss_scaling.hpp"
#include "csmtl/network.hpp"
#include "csmtl/optimizers.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/serialization.hpp"
#include "csmtl/strength.hpp"
#include "csmtl/synthetic.hpp"

namespace csmtl {

enum class PhaseMode { mixed, phase1, phase2 };

inline const char* phase_mode_name(PhaseMode m) {
  switch (m) {
    case PhaseMode::mixed: return "mixed";
    case PhaseMode::phase1: return "phase1";
    case PhaseMode::phase2: return "phase2";
  }
  return "?";
}

inline PhaseMode parse_phase_mode(const std::string& s) {
  if (s == "mixed") return PhaseMode::mixed;
  if (s == "phase1") return PhaseMode::phase1;
  if (s == "phase2") return PhaseMode::phase2;
  throw ConfigError("unknown phase mode '" + s + "' (expected mixed, phase1 or phase2)");
}

struct ModelConfig {
  std::vector<std::size_t> trunk_widths{16, 16};
  std::size_t kernel = 3;
};

struct LossScalingConfig {
  ScalingScheme scheme = ScalingScheme::equal;
  std::optional<std::vector<double>> ratios;
  double temperature = 2.0;
  double uncertainty_lr = 0.01;
};

struct OptimizerSettings {
  double lr = 0.05;
  UpdateRule update;
  std::vector<std::size_t> task_order;  // empty: configuration order
};

/// Everything a run needs. Every field has a default, so `{}` is a valid
/// config file.
struct ExperimentConfig {
  ModelConfig model;
  SyntheticConfig data;
  Method method = Method::ours;
  PhaseMode phase_mode = PhaseMode::mixed;
  LossScalingConfig loss_scaling;
  std::size_t epochs = 20;
  std::size_t steps_per_epoch = 20;
  std::size_t eval_batches = 4;
  OptimizerSettings optimizer;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "runs/default";
  std::string baseline_file;  // empty: no delta_m

  void validate() const;
};

/// The two tasks of the synthetic benchmark, in configuration order.
inline const std::vector<TaskSpec>& benchmark_tasks() {
  static const std::vector<TaskSpec> tasks{{"segmentation", LossKind::cross_entropy, 1.0},
                                           {"depth", LossKind::mse, 1.0}};
  return tasks;
}

inline std::string metric_name(const TaskSpec& t) {
  return t.name + (t.loss == LossKind::cross_entropy ? ".accuracy" : ".rmse");
}

/// Trunk of 3x3 conv + task BN + relu layers, one 1x1 conv head per
/// selected task.
inline ModelSpec build_model_spec(const ExperimentConfig& c, const std::vector<std::size_t>& tasks) {
  ModelSpec spec;
  std::size_t prev = c.data.channels;
  for (std::size_t w : c.model.trunk_widths) {
    spec.trunk.push_back(ConvSpec{prev, w, c.model.kernel, 1, c.model.kernel / 2});
    prev = w;
  }
  for (std::size_t t : tasks) {
    const TaskSpec& ts = benchmark_tasks().at(t);
    const std::size_t out = ts.loss == LossKind::cross_entropy ? c.data.num_classes : 1;
    spec.heads.push_back({ConvSpec{prev, out, 1, 1, 0}});
    spec.tasks.push_back(ts);
  }
  return spec;
}

inline void ExperimentConfig::validate() const {
  data.validate();
  if (model.trunk_widths.empty()) throw ConfigError("config.model.trunk_widths: needs at least one layer");
  for (std::size_t w : model.trunk_widths)
    if (w == 0) throw ConfigError("config.model.trunk_widths: widths must be positive");
  if (model.kernel == 0 || model.kernel % 2 == 0) throw ConfigError("config.model.kernel: must be a positive odd size");
  if (epochs == 0) throw ConfigError("config.epochs: must be at least 1");
  if (steps_per_epoch == 0) throw ConfigError("config.steps_per_epoch: must be at least 1");
  if (eval_batches == 0) throw ConfigError("config.eval_batches: must be at least 1");
  if (seeds.empty()) throw ConfigError("config.seeds: needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("config.seeds: seeds must be distinct");
  }
  if (method != Method::ours && phase_mode != PhaseMode::mixed) {
    throw ConfigError("config.phase_mode: only method ours has phases");
  }
  if (!(optimizer.lr > 0.0) || !std::isfinite(optimizer.lr)) throw ConfigError("config.optimizer.lr: must be positive");
  if (!(optimizer.update.beta1 >= 0.0 && optimizer.update.beta1 < 1.0)) throw ConfigError("config.optimizer.beta1: must lie in [0, 1)");
  if (!(optimizer.update.beta2 >= 0.0 && optimizer.update.beta2 < 1.0)) throw ConfigError("config.optimizer.beta2: must lie in [0, 1)");
  if (!(optimizer.update.epsilon > 0.0)) throw ConfigError("config.optimizer.epsilon: must be positive");
  const std::size_t k = benchmark_tasks().size();
  if (!optimizer.task_order.empty()) {
    std::vector<std::size_t> sorted = optimizer.task_order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted.size() != k || sorted[i] != i) throw ConfigError("config.optimizer.task_order: must be a permutation of 0..1");
  }
  const LossScalingConfig& ls = loss_scaling;
  if (ls.scheme == ScalingScheme::manual) {
    try {
      static_weights(ls.scheme, ls.ratios, k);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.loss_scaling.ratios: ") + e.what());
    }
  } else if (ls.ratios) {
    throw ConfigError("config.loss_scaling.ratios: only the manual scheme takes ratios");
  }
  if (!(ls.temperature > 0.0)) throw ConfigError("config.loss_scaling.temperature: must be positive");
  if (!(ls.uncertainty_lr >= 0.0)) throw ConfigError("config.loss_scaling.uncertainty_lr: must be nonnegative");
  if (out_dir.empty()) throw ConfigError("config.out_dir: must not be empty");
  build_model_spec(*this, {0, 1}).validate();
}

namespace detail {

/// Strict object reader: typed getters and an unknown-key check that names
/// the full field path.
class ConfigReader {
 public:
  ConfigReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  std::string where(const char* key) const { return path_ + "." + key; }

  const Json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void size(const char* key, std::size_t& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + ": expected a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64_list(const char* key, std::vector<std::uint64_t>& out) {
    if (const Json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + ": expected a list of nonnegative integers");
      out.clear();
      for (const Json& e : *v) {
        if (!e.is_number_unsigned()) throw ConfigError(where(key) + ": expected a list of nonnegative integers");
        out.push_back(e.get<std::uint64_t>());
      }
    }
  }
  void size_list(const char* key, std::vector<std::size_t>& out) {
    std::vector<std::uint64_t> tmp(out.begin(), out.end());
    u64_list(key, tmp);
    out.assign(tmp.begin(), tmp.end());
  }
  void number(const char* key, double& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void string(const char* key, std::string& out) {
    if (const Json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <class Parse, class T>
  void parsed(const char* key, T& out, Parse parse) {
    std::string s;
    if (!has(key)) return;
    string(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }
  std::optional<ConfigReader> child(const char* key) {
    const Json* v = take(key);
    if (!v) return std::nullopt;
    return ConfigReader(*v, where(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::ConfigReader r(j, "config");
  if (auto m = r.child("model")) {
    m->size_list("trunk_widths", c.model.trunk_widths);
    m->size("kernel", c.model.kernel);
    m->finish();
  }
  if (auto d = r.child("data")) {
    d->size("batch_size", c.data.batch_size);
    d->size("channels", c.data.channels);
    d->size("height", c.data.height);
    d->size("width", c.data.width);
    d->size("num_classes", c.data.num_classes);
    d->size("regions", c.data.regions);
    d->number("noise", c.data.noise);
    d->finish();
  }
  r.parsed("method", c.method, parse_method);
  r.parsed("phase_mode", c.phase_mode, parse_phase_mode);
  if (auto l = r.child("loss_scaling")) {
    l->parsed("scheme", c.loss_scaling.scheme, parse_scaling);
    if (const Json* v = l->take("ratios")) {
      if (!v->is_null()) {
        if (!v->is_array()) throw ConfigError("config.loss_scaling.ratios: expected a list of numbers or null");
        std::vector<double> ratios;
        for (const Json& e : *v) {
          if (!e.is_number()) throw ConfigError("config.loss_scaling.ratios: expected a list of numbers or null");
          ratios.push_back(e.get<double>());
        }
        c.loss_scaling.ratios = std::move(ratios);
      }
    }
    l->number("temperature", c.loss_scaling.temperature);
    l->number("uncertainty_lr", c.loss_scaling.uncertainty_lr);
    l->finish();
  }
  r.size("epochs", c.epochs);
  r.size("steps_per_epoch", c.steps_per_epoch);
  r.size("eval_batches", c.eval_batches);
  if (auto o = r.child("optimizer")) {
    o->number("lr", c.optimizer.lr);
    o->parsed("update", c.optimizer.update.kind, [](const std::string& s) {
      if (s == "sgd") return UpdateKind::sgd;
      if (s == "adam") return UpdateKind::adam;
      throw ConfigError("unknown update rule '" + s + "' (expected sgd or adam)");
    });
    o->number("beta1", c.optimizer.update.beta1);
    o->number("beta2", c.optimizer.update.beta2);
    o->number("epsilon", c.optimizer.update.epsilon);
    o->size_list("task_order", c.optimizer.task_order);
    o->finish();
  }
  r.u64_list("seeds", c.seeds);
  r.string("out_dir", c.out_dir);
  r.string("baseline_file", c.baseline_file);
  r.finish();
  c.validate();
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json ratios = c.loss_scaling.ratios ? Json(*c.loss_scaling.ratios) : Json(nullptr);
  return Json{
      {"model", {{"trunk_widths", c.model.trunk_widths}, {"kernel", c.model.kernel}}},
      {"data",
       {{"batch_size", c.data.batch_size},
        {"channels", c.data.channels},
        {"height", c.data.height},
        {"width", c.data.width},
        {"num_classes", c.data.num_classes},
        {"regions", c.data.regions},
        {"noise", c.data.noise}}},
      {"method", method_name(c.method)},
      {"phase_mode", phase_mode_name(c.phase_mode)},
      {"loss_scaling",
       {{"scheme", scaling_name(c.loss_scaling.scheme)},
        {"ratios", ratios},
        {"temperature", c.loss_scaling.temperature},
        {"uncertainty_lr", c.loss_scaling.uncertainty_lr}}},
      {"epochs", c.epochs},
      {"steps_per_epoch", c.steps_per_epoch},
      {"eval_batches", c.eval_batches},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"update", c.optimizer.update.kind == UpdateKind::adam ? "adam" : "sgd"},
        {"beta1", c.optimizer.update.beta1},
        {"beta2", c.optimizer.update.beta2},
        {"epsilon", c.optimizer.update.epsilon},
        {"task_order", c.optimizer.task_order}}},
      {"seeds", c.seeds},
      {"out_dir", c.out_dir},
      {"baseline_file", c.baseline_file}};
}

/// `a.b.c=value`. The value is read as JSON when it parses, otherwise as a
/// plain string, so `method=gd` and `seeds=[1,2]` both work.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override '" + key + "' descends into a non-object");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Reads the config file, applies overrides in order and validates.
/// A relative baseline_file is resolved against the config's directory.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  Json j = path.empty() ? Json::object() : read_json_file(path);
  for (const std::string& o : overrides) apply_override(j, o);
  ExperimentConfig c = config_from_json(j);
  if (!path.empty() && !c.baseline_file.empty() && std::filesystem::path(c.baseline_file).is_relative()) {
    c.baseline_file = (std::filesystem::path(path).parent_path() / c.baseline_file).lexically_normal().string();
  }
  return c;
}

/// Named substreams of one root seed.
struct SeedStreams {
  std::uint64_t init = 0;
  std::uint64_t data = 0;
  Rng phase;
  Rng pcgrad;
};

inline SeedStreams seed_streams(std::uint64_t seed) {
  return SeedStreams{substream(seed, "init").next_u64(), substream(seed, "data").next_u64(),
                     substream(seed, "phase-draw"), substream(seed, "pcgrad-order")};
}

inline Batch select_tasks(const SyntheticBatch& sb, const std::vector<std::size_t>& tasks) {
  Batch b;
  b.input = sb.input;
  for (std::size_t t : tasks) b.targets.push_back(t == 0 ? Target{nullptr, sb.classes} : Target{sb.depth, nullptr});
  return b;
}

/// Pixel accuracy for classification heads, rmse for regression heads,
/// over the eval stream with eval-mode batch norm.
inline std::vector<double> evaluate_metrics(Model& model, const SyntheticDataset& data,
                                            const std::vector<std::size_t>& tasks, std::size_t eval_batches) {
  std::vector<double> hits(tasks.size(), 0.0), sq(tasks.size(), 0.0), count(tasks.size(), 0.0);
  for (std::size_t bi = 0; bi < eval_batches; ++bi) {
    const SyntheticBatch sb = data.batch(bi, "eval");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      Tape tape;
      const Var x = tape.constant(sb.input);
      const Tensor& out = tape.value(model.forward(tape, x, i, BnMode::eval));
      const std::size_t n = out.dim(0), ch = out.dim(1), plane = out.dim(2) * out.dim(3);
      if (tasks[i] == 0) {
        const std::vector<int>& labels = *sb.classes;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t p = 0; p < plane; ++p) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < ch; ++c)
              if (out[(b * ch + c) * plane + p] > out[(b * ch + best) * plane + p]) best = c;
            hits[i] += static_cast<int>(best) == labels[b * plane + p];
            count[i] += 1.0;
          }
      } else {
        const Tensor& depth = *sb.depth;
        for (std::size_t j = 0; j < out.size(); ++j) {
          const double d = out[j] - depth[j];
          sq[i] += d * d;
          count[i] += 1.0;
        }
      }
    }
  }
  std::vector<double> m(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) m[i] = tasks[i] == 0 ? hits[i] / count[i] : std::sqrt(sq[i] / count[i]);
  return m;
}

struct EpochRow {
  std::uint64_t seed = 0;
  std::string method;
  std::size_t epoch = 0;
  std::vector<double> train_losses;
  std::vector<double> metrics;
  std::optional<double> delta_m;
  double grad_cosine = 0.0;
  std::vector<double> shares;  // per normed trunk layer, per task
};

struct InvariantResult {
  std::string name;
  bool passed = true;
  std::size_t checks = 0;
  std::string detail;
};

struct SeedStatus {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string message;
};

struct RunReport {
  ExperimentConfig config;
  std::string label;  // method column value
  std::vector<std::string> task_names;
  std::vector<std::string> metric_names;
  std::vector<bool> lower_is_better;
  std::vector<std::string> share_names;
  bool has_delta_m = false;
  std::vector<EpochRow> rows;
  std::vector<Json> runlog;
  std::vector<Json> strengths;
  std::vector<InvariantResult> invariants;
  std::vector<SeedStatus> seeds;

  bool failed() const {
    for (const SeedStatus& s : seeds)
      if (s.failed) return true;
    return false;
  }
  bool invariants_passed() const {
    for (const InvariantResult& r : invariants)
      if (!r.passed) return false;
    return !failed();
  }
};

namespace detail {

class InvariantLog {
 public:
  void check(const std::string& name, bool ok, const std::string& detail = "") {
    InvariantResult& r = find(name);
    ++r.checks;
    if (!ok && r.passed) {
      r.passed = false;
      r.detail = detail;
    }
  }
  std::vector<InvariantResult> results() const { return results_; }
  void merge_into(std::vector<InvariantResult>& out) const {
    for (const InvariantResult& r : results_) {
      auto it = std::find_if(out.begin(), out.end(), [&](const InvariantResult& o) { return o.name == r.name; });
      if (it == out.end()) {
        out.push_back(r);
        continue;
      }
      it->checks += r.checks;
      if (!r.passed && it->passed) {
        it->passed = false;
        it->detail = r.detail;
      }
    }
  }

 private:
  InvariantResult& find(const std::string& name) {
    for (InvariantResult& r : results_)
      if (r.name == name) return r;
    results_.push_back({name, true, 0, ""});
    return results_.back();
  }
  std::vector<InvariantResult> results_;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Trains one model for one seed over the selected benchmark tasks and
/// appends rows, run-log and strength records to `report`.
inline void train_seed(const ExperimentConfig& c, std::uint64_t seed, const std::vector<std::size_t>& tasks,
                       const std::optional<MetricSpec>& baseline, RunReport& report) {
  SeedStreams streams = seed_streams(seed);
  const ModelSpec spec = build_model_spec(c, tasks);
  const std::size_t k = tasks.size();
  Model model(spec, streams.init);
  SyntheticDataset data(c.data, streams.data);

  OptimizerConfig oc;
  oc.method = c.method;
  oc.learning_rate = c.optimizer.lr;
  oc.update = c.optimizer.update;
  if (k == benchmark_tasks().size()) oc.task_order = c.optimizer.task_order;
  MultiTaskOptimizer opt(model, oc);

  std::vector<TaskKind> kinds;
  for (const TaskSpec& t : spec.tasks) kinds.push_back(task_kind_for(t.loss));
  UncertaintyState uncertainty(kinds);
  DwaState dwa;
  dwa.temperature = c.loss_scaling.temperature;
  const ScalingScheme scheme = k == 1 ? ScalingScheme::equal : c.loss_scaling.scheme;

  detail::InvariantLog inv;
  SeedStatus status{seed, false, ""};
  ParameterPartition part = model.partition();

  try {
    for (std::size_t e = 0; e < c.epochs; ++e) {
      Json log{{"seed", seed}, {"method", report.label}, {"epoch", e}};
      Phase phase = Phase::phase1;
      if (c.method == Method::ours) {
        if (c.phase_mode == PhaseMode::mixed) {
          const PhaseDraw d = draw_phase(e, c.epochs, streams.phase);
          phase = d.phase;
          log["p"] = d.p;
        } else {
          phase = c.phase_mode == PhaseMode::phase1 ? Phase::phase1 : Phase::phase2;
        }
        log["phase"] = phase_name(phase);
      }
      std::vector<StrengthReport> snapshot;
      if (c.method == Method::ours && phase == Phase::phase2) snapshot = strength_snapshot(model);

      std::vector<double> epoch_weights;
      if (scheme == ScalingScheme::dwa) {
        epoch_weights = dwa_weights(dwa, k);
        double total = 0.0;
        for (double w : epoch_weights) total += w;
        inv.check("dwa_weights_sum_to_k", std::abs(total - static_cast<double>(k)) <= 1e-9,
                  "epoch " + std::to_string(e) + " sums to " + detail::format_double(total));
      } else if (scheme != ScalingScheme::uncertainty) {
        epoch_weights = static_weights(scheme, c.loss_scaling.ratios, k);
      }

      std::vector<double> loss_sum(k, 0.0);
      std::map<std::string, LayerProjectionLog> layers;
      Json step_weights = Json::array();
      for (std::size_t s = 0; s < c.steps_per_epoch; ++s) {
        const Batch batch = select_tasks(data.batch(e * c.steps_per_epoch + s), tasks);
        std::vector<double> w = epoch_weights;
        if (scheme == ScalingScheme::uncertainty) {
          w.resize(k);
          for (std::size_t i = 0; i < k; ++i) w[i] = uncertainty_loss_factor(kinds[i], uncertainty.rho[i]);
        }
        StepReport r;
        std::size_t shared_writes = 1;
        switch (c.method) {
          case Method::ours:
            if (phase == Phase::phase1) {
              r = opt.phase1_step(batch, w);
              shared_writes = k;
            } else {
              r = opt.phase2_step(batch, snapshot, w);
            }
            break;
          case Method::gd: r = opt.baseline_gd_step(batch, w); break;
          case Method::pcgrad: r = opt.baseline_pcgrad_step(batch, w, streams.pcgrad); break;
        }
        bool counts_ok = true;
        for (const NamedParam& p : part.shared) counts_ok &= opt.updater().writes(*p.tensor) == shared_writes;
        for (const auto& own : part.per_task)
          for (const NamedParam& p : own) counts_ok &= opt.updater().writes(*p.tensor) == 1;
        inv.check("update_counts", counts_ok, "epoch " + std::to_string(e) + " step " + std::to_string(s));
        for (const LayerProjectionLog& l : r.layers) {
          LayerProjectionLog& acc = layers[l.layer];
          acc.layer = l.layer;
          acc.pairs += l.pairs;
          acc.conflicts += l.conflicts;
          acc.projections += l.projections;
          acc.min_post_dot = std::min(acc.min_post_dot, l.min_post_dot);
          if (c.method == Method::ours && l.pairs > 0) {
            inv.check("post_projection_non_conflict", l.min_post_dot >= -1e-12,
                      l.layer + " min post dot " + detail::format_double(l.min_post_dot));
          }
        }
        for (std::size_t i = 0; i < k; ++i) loss_sum[i] += r.losses[i];
        if (scheme == ScalingScheme::uncertainty) {
          step_weights.push_back(w);
          const auto g = uncertainty_rho_gradient(r.losses, uncertainty);
          for (std::size_t i = 0; i < k; ++i) uncertainty.rho[i] -= c.loss_scaling.uncertainty_lr * g[i];
        }
      }

      EpochRow row;
      row.seed = seed;
      row.method = report.label;
      row.epoch = e;
      for (double l : loss_sum) row.train_losses.push_back(l / static_cast<double>(c.steps_per_epoch));
      if (scheme == ScalingScheme::dwa) dwa.record(row.train_losses);
      row.metrics = evaluate_metrics(model, data, tasks, c.eval_batches);
      if (baseline) row.delta_m = delta_m(row.metrics, *baseline);
      const SyntheticBatch probe = data.batch(0, "eval");
      row.grad_cosine = mean_pairwise_cosine(model, select_tasks(probe, tasks));
      for (const StrengthReport& sr : strength_snapshot(model)) {
        const std::string problem = check_strength_report(sr);
        inv.check("strength_reports_valid", problem.empty(), sr.layer + ": " + problem);
        for (double share : priority_share(sr)) row.shares.push_back(share);
        report.strengths.push_back({{"seed", seed}, {"method", report.label}, {"epoch", e}, {"layer", sr.layer},
                                    {"raw", sr.raw}, {"normalized", sr.normalized}, {"groups", sr.groups}});
      }

      log["losses"] = row.train_losses;
      if (scheme == ScalingScheme::uncertainty) {
        log["weights"] = step_weights;
        log["rho"] = uncertainty.rho.values();
      } else {
        log["weights"] = epoch_weights;
      }
      Json jl = Json::array();
      for (const auto& [name, l] : layers) {
        Json entry{{"layer", name}, {"pairs", l.pairs}, {"conflicts", l.conflicts}, {"projections", l.projections}};
        if (l.pairs > 0) entry["min_post_dot"] = l.min_post_dot;
        jl.push_back(entry);
      }
      log["layers"] = jl;
      report.runlog.push_back(log);
      report.rows.push_back(std::move(row));
    }
  } catch (const NumericError& e) {
    status.failed = true;
    status.message = e.what();
    inv.check("finite_training", false, e.what());
  }
  if (!status.failed) inv.check("finite_training", true);
  inv.merge_into(report.invariants);
  report.seeds.push_back(status);
}

/// Metric layout for the selected tasks.
inline void describe_tasks(RunReport& r, const ExperimentConfig& c, const std::vector<std::size_t>& tasks) {
  r.task_names.clear();
  r.metric_names.clear();
  r.lower_is_better.clear();
  r.share_names.clear();
  for (std::size_t t : tasks) {
    const TaskSpec& ts = benchmark_tasks().at(t);
    r.task_names.push_back(ts.name);
    r.metric_names.push_back(metric_name(ts));
    r.lower_is_better.push_back(ts.loss != LossKind::cross_entropy);
  }
  for (std::size_t l = 0; l < c.model.trunk_widths.size(); ++l)
    for (std::size_t t : tasks) r.share_names.push_back("trunk." + std::to_string(l) + "." + benchmark_tasks()[t].name);
}

/// Baseline file: per-task metric of the single-task models, averaged over
/// seeds.
struct BaselineReport {
  MetricSpec spec;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> per_seed;  // [seed][task]
  std::vector<InvariantResult> invariants;
  bool failed = false;
};

inline Json baseline_to_json(const BaselineReport& b) {
  Json metrics = Json::array();
  for (const MetricEntry& m : b.spec.metrics)
    metrics.push_back({{"name", m.name}, {"lower_is_better", m.lower_is_better}, {"baseline", m.baseline}});
  return Json{{"format", "csmtl-baseline-1"}, {"metrics", metrics}, {"seeds", b.seeds}, {"per_seed", b.per_seed}};
}

inline MetricSpec load_baseline(const std::string& path) {
  const Json j = read_json_file(path);
  if (j.value("format", "") != "csmtl-baseline-1") throw DataError(path + ": not a baseline file");
  MetricSpec spec;
  for (const Json& m : j.at("metrics")) {
    spec.metrics.push_back({m.at("name").get<std::string>(), m.at("lower_is_better").get<bool>(), m.at("baseline").get<double>()});
  }
  std::vector<std::string> expected;
  for (const TaskSpec& t : benchmark_tasks()) expected.push_back(metric_name(t));
  if (spec.metrics.size() != expected.size()) throw DataError(path + ": baseline has the wrong number of metrics");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (spec.metrics[i].name != expected[i]) {
      throw DataError(path + ": baseline metric " + std::to_string(i) + " is '" + spec.metrics[i].name + "', expected '" +
                      expected[i] + "'");
    }
  }
  spec.validate();
  return spec;
}

/// Single-task GD runs with the same trunk, data and schedule as the
/// multi-task runs.
inline BaselineReport run_baseline(ExperimentConfig c) {
  c.method = Method::gd;
  c.phase_mode = PhaseMode::mixed;
  c.validate();
  BaselineReport out;
  out.seeds = c.seeds;
  std::vector<double> sums(benchmark_tasks().size(), 0.0);
  for (std::uint64_t seed : c.seeds) {
    std::vector<double> finals;
    for (std::size_t t = 0; t < benchmark_tasks().size(); ++t) {
      RunReport r;
      r.label = "single." + benchmark_tasks()[t].name;
      train_seed(c, seed, {t}, std::nullopt, r);
      for (const InvariantResult& inv : r.invariants) {
        auto it = std::find_if(out.invariants.begin(), out.invariants.end(),
                               [&](const InvariantResult& o) { return o.name == inv.name; });
        if (it == out.invariants.end()) {
          out.invariants.push_back(inv);
        } else {
          it->checks += inv.checks;
          if (!inv.passed && it->passed) *it = inv;
        }
      }
      if (r.failed() || r.rows.empty()) throw NumericError("baseline run for seed " + std::to_string(seed) + " failed");
      finals.push_back(r.rows.back().metrics[0]);
      sums[t] += finals.back();
    }
    out.per_seed.push_back(finals);
  }
  for (std::size_t t = 0; t < benchmark_tasks().size(); ++t) {
    const TaskSpec& ts = benchmark_tasks()[t];
    out.spec.metrics.push_back({metric_name(ts), ts.loss != LossKind::cross_entropy,
                                sums[t] / static_cast<double>(c.seeds.size())});
  }
  return out;
}

inline RunReport run_experiment(const ExperimentConfig& c) {
  c.validate();
  std::optional<MetricSpec> baseline;
  if (!c.baseline_file.empty()) baseline = load_baseline(c.baseline_file);
  RunReport report;
  report.config = c;
  report.label = method_name(c.method);
  if (c.method == Method::ours && c.phase_mode != PhaseMode::mixed) report.label += std::string("-") + phase_mode_name(c.phase_mode);
  report.has_delta_m = baseline.has_value();
  describe_tasks(report, c, {0, 1});
  for (std::uint64_t seed : c.seeds) train_seed(c, seed, {0, 1}, baseline, report);
  return report;
}

/// In-memory form of metrics.csv.
struct MetricsTable {
  std::vector<std::string> columns;
  struct Row {
    std::uint64_t seed = 0;
    std::string method;
    std::size_t epoch = 0;
    std::vector<double> values;  // columns after the first three
    bool operator==(const Row&) const = default;
  };
  std::vector<Row> rows;
  bool operator==(const MetricsTable&) const = default;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 3; i < columns.size(); ++i)
      if (columns[i] == name) return i - 3;
    throw LookupError("metrics table has no column '" + name + "'");
  }
};

inline MetricsTable metrics_table(const RunReport& r) {
  MetricsTable t;
  t.columns = {"seed", "method", "epoch"};
  for (const std::string& n : r.task_names) t.columns.push_back("train_loss." + n);
  for (const std::string& n : r.metric_names) t.columns.push_back(n);
  if (r.has_delta_m) t.columns.push_back("delta_m");
  t.columns.push_back("grad_cosine");
  for (const std::string& n : r.share_names) t.columns.push_back("share." + n);
  for (const EpochRow& row : r.rows) {
    MetricsTable::Row out{row.seed, row.method, row.epoch, {}};
    out.values = row.train_losses;
    out.values.insert(out.values.end(), row.metrics.begin(), row.metrics.end());
    if (r.has_delta_m) out.values.push_back(row.delta_m.value_or(std::nan("")));
    out.values.push_back(row.grad_cosine);
    out.values.insert(out.values.end(), row.shares.begin(), row.shares.end());
    t.rows.push_back(std::move(out));
  }
  return t;
}

inline std::string metrics_csv(const MetricsTable& t) {
  std::ostringstream out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << "\n";
  for (const MetricsTable::Row& r : t.rows) {
    out << r.seed << "," << r.method << "," << r.epoch;
    for (double v : r.values) out << "," << detail::format_double(v);
    out << "\n";
  }
  return out.str();
}

inline MetricsTable parse_metrics_csv(const std::string& text) {
  MetricsTable t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, ',')) parts.push_back(cur);
    return parts;
  };
  if (!std::getline(in, line)) throw DataError("metrics file is empty");
  t.columns = split(line);
  if (t.columns.size() < 3 || t.columns[0] != "seed" || t.columns[1] != "method" || t.columns[2] != "epoch") {
    throw DataError("metrics file header must start with seed,method,epoch");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto parts = split(line);
    if (parts.size() != t.columns.size()) throw DataError("metrics line " + std::to_string(lineno) + " has the wrong column count");
    MetricsTable::Row r;
    r.seed = std::stoull(parts[0]);
    r.method = parts[1];
    r.epoch = std::stoull(parts[2]);
    for (std::size_t i = 3; i < parts.size(); ++i) r.values.push_back(std::strtod(parts[i].c_str(), nullptr));
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline Json invariants_json(const std::vector<InvariantResult>& inv) {
  Json out = Json::array();
  for (const InvariantResult& r : inv) {
    out.push_back({{"name", r.name}, {"passed", r.passed}, {"checks", r.checks}, {"detail", r.detail}});
  }
  return out;
}

/// Final-epoch metrics per seed and their means.
inline Json summary_json(const RunReport& r) {
  Json seeds = Json::array();
  std::vector<double> mean(r.metric_names.size(), 0.0);
  double mean_dm = 0.0;
  std::size_t finished = 0;
  for (const SeedStatus& s : r.seeds) {
    Json js{{"seed", s.seed}, {"failed", s.failed}, {"message", s.message}};
    const EpochRow* last = nullptr;
    for (const EpochRow& row : r.rows)
      if (row.seed == s.seed) last = &row;
    if (last && !s.failed && last->epoch + 1 == r.config.epochs) {
      Json fin = Json::object();
      for (std::size_t i = 0; i < r.metric_names.size(); ++i) {
        fin[r.metric_names[i]] = last->metrics[i];
        mean[i] += last->metrics[i];
      }
      js["final"] = fin;
      if (last->delta_m) {
        js["delta_m"] = *last->delta_m;
        mean_dm += *last->delta_m;
      }
      ++finished;
    }
    seeds.push_back(js);
  }
  Json means = Json::object();
  for (std::size_t i = 0; i < r.metric_names.size() && finished > 0; ++i) means[r.metric_names[i]] = mean[i] / static_cast<double>(finished);
  return Json{{"created", utc_timestamp()},
              {"method", r.label},
              {"config", config_to_json(r.config)},
              {"rows", r.rows.size()},
              {"columns", metrics_table(r).columns},
              {"seeds", seeds},
              {"mean_final", means},
              {"mean_delta_m", r.has_delta_m && finished > 0 ? Json(mean_dm / static_cast<double>(finished)) : Json(nullptr)},
              {"invariants", invariants_json(r.invariants)},
              {"partial", r.failed()},
              {"passed", r.invariants_passed()},
              {"files", {"metrics.csv", "runlog.jsonl", "strengths.jsonl", "summary.json"}}};
}

/// metrics.csv, runlog.jsonl, strengths.jsonl and summary.json under
/// `dir`. Only summary.json carries a timestamp.
inline void write_report(const RunReport& r, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir + "': " + ec.message());
  const std::filesystem::path base(dir);
  write_text_file((base / "metrics.csv").string(), metrics_csv(metrics_table(r)));
  std::string log, str;
  for (const Json& j : r.runlog) log += j.dump() + "\n";
  for (const Json& j : r.strengths) str += j.dump() + "\n";
  write_text_file((base / "runlog.jsonl").string(), log);
  write_text_file((base / "strengths.jsonl").string(), str);
  write_text_file((base / "summary.json").string(), summary_json(r).dump(2) + "\n");
}

/// Per-method means of the last epoch of each seed in a metrics table.
struct MethodSummary {
  std::string method;
  std::size_t seeds = 0;
  std::vector<std::string> columns;
  std::vector<double> mean;
};

inline std::vector<MethodSummary> summarize_metrics(const MetricsTable& t) {
  std::map<std::pair<std::string, std::uint64_t>, const MetricsTable::Row*> last;
  for (const MetricsTable::Row& r : t.rows) {
    auto& slot = last[{r.method, r.seed}];
    if (!slot || slot->epoch < r.epoch) slot = &r;
  }
  std::map<std::string, MethodSummary> by_method;
  for (const auto& [key, row] : last) {
    MethodSummary& m = by_method[key.first];
    m.method = key.first;
    m.columns.assign(t.columns.begin() + 3, t.columns.end());
    if (m.mean.empty()) m.mean.assign(row->values.size(), 0.0);
    for (std::size_t i = 0; i < row->values.size(); ++i) m.mean[i] += row->values[i];
    ++m.seeds;
  }
  std::vector<MethodSummary> out;
  for (auto& [name, m] : by_method) {
    for (double& v : m.mean) v /= static_cast<double>(m.seeds);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace csmtl
