// csmtl: run, baseline, verify and report subcommands.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "csmtl/csmtl.hpp"

namespace fs = std::filesystem;
using namespace csmtl;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string method;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", o.sets, "override as dotted.key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "run this single seed instead of the config's list");
  cmd->add_option("--out-dir", o.out_dir, "output directory");
  cmd->add_option("--method", o.method, "ours, gd or pcgrad");
}

ExperimentConfig resolve(const CommonOptions& o) {
  std::vector<std::string> sets = o.sets;
  if (o.seed) sets.push_back("seeds=[" + std::to_string(*o.seed) + "]");
  if (!o.out_dir.empty()) sets.push_back("out_dir=" + Json(o.out_dir).dump());
  if (!o.method.empty()) sets.push_back("method=" + Json(o.method).dump());
  return load_config(o.config, sets);
}

void print_invariants(const std::vector<InvariantResult>& inv) {
  for (const InvariantResult& r : inv) {
    std::printf("  %-32s %s (%zu checks)%s%s\n", r.name.c_str(), r.passed ? "ok" : "FAILED", r.checks,
                r.detail.empty() ? "" : ": ", r.detail.c_str());
  }
}

int cmd_run(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  RunReport r = run_experiment(c);
  write_report(r, c.out_dir);
  std::printf("%s: %zu rows written to %s\n", r.label.c_str(), r.rows.size(), c.out_dir.c_str());
  const Json s = summary_json(r);
  for (auto& [k, v] : s["mean_final"].items()) std::printf("  mean final %s = %.6g\n", k.c_str(), v.get<double>());
  if (!s["mean_delta_m"].is_null()) std::printf("  mean delta_m = %+.6g\n", s["mean_delta_m"].get<double>());
  for (const SeedStatus& st : r.seeds)
    if (st.failed) std::printf("  seed %llu failed: %s\n", static_cast<unsigned long long>(st.seed), st.message.c_str());
  print_invariants(r.invariants);
  return r.invariants_passed() ? 0 : 1;
}

int cmd_baseline(const CommonOptions& o, std::string output) {
  const ExperimentConfig c = resolve(o);
  if (output.empty()) output = (fs::path(o.config).parent_path() / "baseline.json").string();
  BaselineReport b = run_baseline(c);
  write_text_file(output, baseline_to_json(b).dump(2) + "\n");
  for (const MetricEntry& m : b.spec.metrics) std::printf("  %s = %.6g\n", m.name.c_str(), m.baseline);
  std::printf("baseline over %zu seeds written to %s\n", b.seeds.size(), output.c_str());
  print_invariants(b.invariants);
  bool ok = !b.failed;
  for (const InvariantResult& r : b.invariants) ok &= r.passed;
  return ok ? 0 : 1;
}

int cmd_verify() {
  bool ok = true;
  for (const CheckResult& r : run_oracle_suite()) {
    const bool info = r.name.find("informational") != std::string::npos;
    if (!info) ok &= r.passed;
    std::printf("%-5s %s: %s [%.1fs]\n", info ? "INFO" : (r.passed ? "PASS" : "FAIL"), r.name.c_str(), r.detail.c_str(),
                r.seconds);
  }
  return ok ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& output) {
  std::string csv;
  std::vector<std::string> header;
  for (const std::string& d : dirs) {
    const MetricsTable t = parse_metrics_csv(read_text_file((fs::path(d) / "metrics.csv").string()));
    for (const MethodSummary& m : summarize_metrics(t)) {
      if (header.empty()) {
        header = m.columns;
        csv = "run,method,seeds";
        for (const std::string& col : header) csv += "," + col;
        csv += "\n";
      }
      std::printf("%s [%s, %zu seeds]\n", d.c_str(), m.method.c_str(), m.seeds);
      csv += d + "," + m.method + "," + std::to_string(m.seeds);
      for (std::size_t i = 0; i < m.columns.size(); ++i) {
        if (m.columns[i].rfind("share.", 0) != 0) std::printf("  %-24s %.6g\n", m.columns[i].c_str(), m.mean[i]);
        csv += "," + detail::format_double(m.mean[i]);
      }
      csv += "\n";
    }
  }
  if (!output.empty()) write_text_file(output, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Connection-strength multi-task training lab"};
  app.require_subcommand(1);

  CommonOptions run_opts, base_opts;
  auto* run = app.add_subcommand("run", "train every seed of a config and write metrics, logs and a summary");
  add_common(run, run_opts);

  std::string base_out;
  auto* base = app.add_subcommand("baseline", "train single-task baselines and store them for delta_m");
  add_common(base, base_opts);
  base->add_option("--output", base_out, "baseline file (default: baseline.json next to the config)");

  auto* verify = app.add_subcommand("verify", "run the oracle suite");

  std::vector<std::string> report_dirs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "summarize final-epoch means of one or more run directories");
  report->add_option("dirs", report_dirs, "run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--output", report_out, "also write the summary as CSV");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(run_opts);
    if (*base) return cmd_baseline(base_opts, base_out);
    if (*verify) return cmd_verify();
    if (*report) return cmd_report(report_dirs, report_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
