#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grlvr/trainer.hpp"

namespace grlvr {

/// One "step" line of a metrics stream.
struct StepRow {
  long iteration = 0;
  int k = 1;
  long step = 0;
  long rollouts = 0;
  bool applied = false;
  double mean_reward = 0.0;
  std::optional<double> eval_reward;
  double loss = 0.0;
  double chi2 = 0.0;
  double lm_grad_energy = 0.0;
  double c_max = 0.0;
  bool bound_satisfied = true;
  double global_grad_norm = 0.0;
  double clip_fraction = 0.0;
  double max_ratio = 1.0;
  double min_behavior_prob = 1.0;
  ComponentChange rwc;
  std::optional<double> z;
  bool fired = false;
};

struct RunMetrics {
  std::string label;
  std::string regime;
  double initial_eval = 0.0;
  std::vector<StepRow> steps;
  std::string status;  // from the final line; empty if the stream is truncated
};

/// Parses a metrics JSONL file. Malformed lines throw InputError naming the line number.
RunMetrics load_metrics(const std::filesystem::path& path, std::string label = {});

struct CheckpointPoint {
  long iteration = 0;  // completed iterations
  long rollouts = 0;
  double eval_reward = 0.0;
};

/// Evaluation points, starting with the pre-training evaluation at zero rollouts.
std::vector<CheckpointPoint> checkpoint_curve(const RunMetrics& run);

/// Mean eval reward over the last `last_n` checkpoints.
double reference_performance(const RunMetrics& baseline, int last_n = 5);

/// Rollouts consumed at the first checkpoint whose eval reward reaches `reference`.
std::optional<long> rollouts_to_reach(const RunMetrics& run, double reference);

double speedup_factor(double baseline_cost, double candidate_cost);
double cost_reduction(double baseline_cost, double candidate_cost);

struct Efficiency {
  double reference = 0.0;
  std::optional<long> baseline_rollouts;
  std::optional<long> candidate_rollouts;
  std::optional<double> speedup;
  std::optional<double> reduction;
};

Efficiency compare_efficiency(const RunMetrics& baseline, const RunMetrics& candidate);

/// Last record of each iteration.
struct IterationView {
  long iteration = 0;
  double mean_reward = 0.0;
  ComponentChange rwc;
};

std::vector<IterationView> per_iteration(const RunMetrics& run);

/// Trailing mean over `window` iterations (shorter at the start).
std::vector<double> smoothed_reward(std::span<const IterationView> iters, int window);

struct CollapseAnalysis {
  std::vector<long> reward_drop;   // iterations where smoothed reward <= (1 - drop) * running peak
  std::vector<long> lm_head_surge; // iterations where lm_head change >= ratio * median change
  std::optional<long> onset;       // first drop iteration with a surge within +-window
};

CollapseAnalysis analyze_collapse(const RunMetrics& run, int window = 10, double drop = 0.2,
                                  double ratio = 5.0);

/// Z-score of each increment of `series` against the previous `window` increments
/// (population std); empty until the window is full.
std::vector<std::optional<double>> increment_zscores(std::span<const double> series,
                                                     int window = 20, double eps = 1e-8);

/// Writes performance.csv, weight_change.csv, monitor.csv and efficiency.csv. The first run
/// is the baseline for the efficiency table.
void write_report(const std::vector<RunMetrics>& runs, const std::filesystem::path& out_dir);

}  // namespace grlvr
