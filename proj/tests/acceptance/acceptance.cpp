// Acceptance suite: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>

#include "csmtl/csmtl.hpp"

namespace fs = std::filesystem;
using namespace csmtl;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Line {
  int id;
  CheckResult result;
};

void print(const Line& l) {
  std::printf("[%2d] %s  %s: %s [%.1fs]\n", l.id, l.result.passed ? "PASS" : "FAIL", l.result.name.c_str(),
              l.result.detail.c_str(), l.result.seconds);
  std::fflush(stdout);
}

/// Final-epoch row of every seed.
std::map<std::uint64_t, const EpochRow*> final_rows(const RunReport& r) {
  std::map<std::uint64_t, const EpochRow*> out;
  for (const EpochRow& row : r.rows)
    if (row.epoch + 1 == r.config.epochs) out[row.seed] = &row;
  return out;
}

ExperimentConfig with(ExperimentConfig c, Method m, PhaseMode p = PhaseMode::mixed) {
  c.method = m;
  c.phase_mode = p;
  return c;
}

CheckResult phase1_alignment(const ExperimentConfig& base) {
  return detail::timed("phase-1 gradient alignment vs gd", [&] {
    CheckResult r;
    ExperimentConfig c = base;
    c.baseline_file.clear();
    const RunReport ours = run_experiment(with(c, Method::ours, PhaseMode::phase1));
    const RunReport gd = run_experiment(with(c, Method::gd));
    const auto a = final_rows(ours), b = final_rows(gd);
    std::size_t wins = 0;
    std::string per;
    for (std::uint64_t s : c.seeds) {
      if (!a.count(s) || !b.count(s)) {
        per += " seed " + std::to_string(s) + " missing;";
        continue;
      }
      const double x = a.at(s)->grad_cosine, y = b.at(s)->grad_cosine;
      wins += x > y;
      char buf[96];
      std::snprintf(buf, sizeof buf, " %.4f/%.4f", x, y);
      per += buf;
    }
    const std::size_t need = (4 * c.seeds.size() + 4) / 5;
    r.passed = c.seeds.size() >= 5 && wins >= need && ours.invariants_passed() && gd.invariants_passed();
    r.detail = std::to_string(wins) + "/" + std::to_string(c.seeds.size()) + " seeds with cosine(ours-phase1) > cosine(gd) (need >= " +
               std::to_string(need) + ") after " + std::to_string(c.epochs * c.steps_per_epoch) + " steps; ours/gd:" + per;
    return r;
  });
}

CheckResult end_to_end(const ExperimentConfig& base, const fs::path& work, std::string& baseline_path) {
  return detail::timed("desk-scale delta_m ordering", [&] {
    CheckResult r;
    const auto start = Clock::now();
    ExperimentConfig c = base;
    BaselineReport b = run_baseline(c);
    baseline_path = (work / "baseline.json").string();
    write_text_file(baseline_path, baseline_to_json(b).dump(2) + "\n");
    c.baseline_file = baseline_path;
    std::map<std::string, double> mean;
    bool invariants = !b.failed;
    for (Method m : {Method::ours, Method::gd, Method::pcgrad}) {
      const RunReport rep = run_experiment(with(c, m));
      write_report(rep, (work / method_name(m)).string());
      invariants &= rep.invariants_passed();
      double total = 0.0;
      std::size_t n = 0;
      for (const auto& [seed, row] : final_rows(rep)) {
        total += row->delta_m.value_or(std::nan(""));
        ++n;
      }
      mean[method_name(m)] = n == c.seeds.size() ? total / static_cast<double>(n) : std::nan("");
    }
    const double elapsed = since(start);
    r.passed = c.seeds.size() >= 5 && invariants && mean["ours"] > mean["gd"] && mean["ours"] >= mean["pcgrad"] &&
               elapsed < 1800.0;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "mean delta_m over %zu seeds: ours %+.5f, gd %+.5f, pcgrad %+.5f (need ours > gd, ours >= pcgrad); "
                  "%.0fs < 1800s",
                  c.seeds.size(), mean["ours"], mean["gd"], mean["pcgrad"], elapsed);
    r.detail = buf;
    return r;
  });
}

CheckResult determinism(const std::string& cli, const std::string& config, const fs::path& work,
                        const std::string& baseline_path) {
  return detail::timed("determinism of run outputs", [&] {
    CheckResult r;
    r.passed = true;
    std::size_t compared = 0;
    std::string notes;
    for (const char* method : {"ours", "pcgrad", "gd"}) {
      std::string bytes[2];
      for (int i = 0; i < 2; ++i) {
        const fs::path out = work / ("determinism_" + std::string(method) + "_" + std::to_string(i));
        fs::remove_all(out);
        const std::string cmd = "\"" + cli + "\" run --config \"" + config + "\" --seed 0 --method " + method +
                                " --out-dir \"" + out.string() + "\" --set baseline_file=\"" + baseline_path +
                                "\" > \"" + (work / "determinism.log").string() + "\" 2>&1";
        const int rc = std::system(cmd.c_str());
        if (rc != 0) {
          r.passed = false;
          notes += std::string(" ") + method + " exited " + std::to_string(rc) + ";";
        }
        try {
          bytes[i] = read_text_file((out / "metrics.csv").string());
        } catch (const std::exception& e) {
          r.passed = false;
          notes += std::string(" ") + e.what() + ";";
        }
      }
      const bool same = !bytes[0].empty() && bytes[0] == bytes[1];
      r.passed &= same;
      if (!same) notes += std::string(" ") + method + " differs;";
      compared += bytes[0].size();
    }
    r.detail = "csmtl_cli run twice per method (ours, pcgrad, gd), seed 0: metrics.csv " +
               std::string(r.passed ? "bit-identical" : "MISMATCH") + ", " + std::to_string(compared) + " bytes compared" +
               notes;
    return r;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work_dir = "acceptance_runs", config, cli;
  app.add_option("--work-dir", work_dir, "scratch directory for experiment outputs");
  app.add_option("--config", config, "benchmark config")->required()->check(CLI::ExistingFile);
  app.add_option("--cli", cli, "path to csmtl_cli")->required()->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  const fs::path work(work_dir);
  fs::create_directories(work);
  const auto start = Clock::now();
  std::vector<Line> lines;
  auto run = [&](int id, CheckResult r) {
    lines.push_back({id, std::move(r)});
    print(lines.back());
  };
  try {
    CheckResult c1 = check_gradient_exactness(100);
    c1.passed &= c1.seconds < 60.0;
    c1.detail += detail::fmt("; %.1fs < 60s", c1.seconds);
    run(1, c1);
    run(2, check_strength_suite(1000));
    run(3, check_projection_contract(10000));
    CheckResult c4 = check_theorem1(1000);
    c4.passed &= c4.seconds < 120.0;
    c4.detail += detail::fmt("; %.1fs < 120s", c4.seconds);
    run(4, c4);
    CheckResult c5 = check_convergence(100, 100000);
    c5.passed &= c5.seconds < 300.0;
    c5.detail += detail::fmt("; %.1fs < 300s", c5.seconds);
    run(5, c5);
    run(6, check_phase_mixing(100000));

    const ExperimentConfig bench = load_config(config);
    run(7, phase1_alignment(bench));
    std::string baseline_path;
    run(8, end_to_end(bench, work, baseline_path));
    run(9, check_loss_scaling());
    run(10, determinism(cli, config, work, baseline_path));
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::size_t passed = 0;
  for (const Line& l : lines) passed += l.result.passed;
  std::printf("%zu/%zu criteria passed in %.0fs\n", passed, lines.size(), since(start));
  return passed == lines.size() ? 0 : 1;
}
