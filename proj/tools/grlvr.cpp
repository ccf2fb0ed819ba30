#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "grlvr/checkpoint.hpp"
#include "grlvr/config.hpp"
#include "grlvr/error.hpp"
#include "grlvr/report.hpp"
#include "grlvr/trainer.hpp"
#include "grlvr/verify.hpp"

namespace fs = std::filesystem;
using namespace grlvr;

namespace {

enum Exit { kOk = 0, kViolation = 1, kUsage = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Run config (JSON)");
  app->add_option("--set", c.overrides, "Override a config field: dotted.path=value")
      ->allow_extra_args(false);
  app->add_option("--seed", c.seed, "Seed override");
  app->add_option("--output-dir", c.output_dir, "Output directory (default: $GRLVR_OUTPUT_DIR)");
}

fs::path output_dir(const Common& c, const char* fallback) {
  if (!c.output_dir.empty()) return c.output_dir;
  if (const char* env = std::getenv("GRLVR_OUTPUT_DIR"); env && *env) return env;
  return fallback;
}

RunConfig resolve(const Common& c) {
  auto ov = c.overrides;
  if (c.seed) ov.push_back(fmt::format("seed={}", *c.seed));
  return resolve_config(c.config, ov);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void echo_config(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
}

PolicyParams load_policy(const std::string& checkpoint, const RunConfig& cfg) {
  if (checkpoint.empty()) return init_params(cfg.model, cfg.seed, cfg.init_std);
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
  try {
    return load_checkpoint(checkpoint, &cfg.model);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
}

ExecPolicy exec_for(const RunConfig& cfg) {
  return cfg.trainer.workers > 1 ? ExecPolicy::omp(cfg.trainer.workers) : ExecPolicy::serial();
}

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = output_dir(c, "grlvr-train");
  const auto result = run(cfg, dir);
  if (result.status != "ok") {
    std::cerr << "grlvr: error=numeric_abort " << result.error << '\n';
    return kNumeric;
  }
  std::cout << fmt::format("iterations={} optimizer_steps={} rollouts={} gate_fires={} dir={}\n",
                           result.state.iteration, result.state.optimizer_steps,
                           result.state.rollouts, result.state.gate_fires, dir.string());
  return kOk;
}

int cmd_measure(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = output_dir(c, "grlvr-measure");
  echo_config(dir, cfg);
  const PolicyParams params = load_policy(cfg.measure.checkpoint, cfg);
  const std::string rep = measure_report(params, cfg, exec_for(cfg));
  write_text(dir / "constants.json", rep + "\n");
  std::cout << rep << '\n';
  return kOk;
}

int cmd_verify(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = output_dir(c, "grlvr-verify");
  echo_config(dir, cfg);
  const PolicyParams params = load_policy(cfg.verify.checkpoint, cfg);
  const auto rep = run_verification(params, cfg, exec_for(cfg));
  write_text(dir / "verify.json", rep.to_json() + "\n");
  std::cout << rep.to_json() << '\n';
  if (!rep.ok()) {
    for (const auto& chk : rep.checks)
      if (chk.n_violations)
        std::cerr << fmt::format("grlvr: violation check={} count={}\n", chk.name, chk.n_violations);
    return kViolation;
  }
  return kOk;
}

int cmd_report(const Common& c, const std::vector<std::string>& files,
               const std::vector<std::string>& labels) {
  if (files.empty()) throw ConfigError("report needs at least one metrics file");
  if (!labels.empty() && labels.size() != files.size())
    throw ConfigError("--label count must match the metrics file count");
  std::vector<RunMetrics> runs;
  for (std::size_t i = 0; i < files.size(); ++i)
    runs.push_back(load_metrics(files[i], labels.empty() ? std::string() : labels[i]));
  const fs::path dir = output_dir(c, "grlvr-report");
  write_report(runs, dir);
  for (std::size_t i = 1; i < runs.size(); ++i) {
    const auto e = compare_efficiency(runs[0], runs[i]);
    std::cout << fmt::format("{} vs {}: reference={:.4f} speedup={} reduction={}\n",
                             runs[i].label, runs[0].label, e.reference,
                             e.speedup ? fmt::format("{:.4f}", *e.speedup) : "n/a",
                             e.reduction ? fmt::format("{:.4f}", *e.reduction) : "n/a");
  }
  std::cout << "csv=" << dir.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GRPO sample-reuse trainer with gradient gating and bound checks"};
  app.require_subcommand(1);
  Common train_opts, measure_opts, verify_opts, report_opts;
  auto* train = app.add_subcommand("train", "Run GRPO training");
  add_common(train, train_opts);
  auto* measure = app.add_subcommand("measure", "Measure the architectural constants");
  add_common(measure, measure_opts);
  auto* verify = app.add_subcommand("verify", "Run the gradient inequality suite");
  add_common(verify, verify_opts);
  auto* report = app.add_subcommand("report", "Turn metrics streams into CSV tables");
  add_common(report, report_opts);
  std::vector<std::string> files, labels;
  report->add_option("metrics", files, "metrics.jsonl files; the first is the baseline");
  report->add_option("--label", labels, "Series label per metrics file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_opts);
    if (*measure) return cmd_measure(measure_opts);
    if (*verify) return cmd_verify(verify_opts);
    if (*report) return cmd_report(report_opts, files, labels);
  } catch (const ConfigError& e) {
    std::cerr << "grlvr: error=config " << e.what() << '\n';
    return kUsage;
  } catch (const InputError& e) {
    std::cerr << "grlvr: error=input " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "grlvr: error=numeric_abort " << e.what() << '\n';
    return kNumeric;
  } catch (const DegenerateConstantError& e) {
    std::cerr << "grlvr: error=degenerate_constant " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "grlvr: error=io " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
