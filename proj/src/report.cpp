#include "grlvr/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "grlvr/error.hpp"

namespace grlvr {

using nlohmann::json;

namespace {

std::optional<double> opt_real(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

double real_or_nan(const json& j, const char* key) {
  return opt_real(j, key).value_or(std::nan(""));
}

StepRow parse_step(const json& j) {
  StepRow r;
  r.iteration = j.at("iteration").get<long>();
  r.k = j.at("k").get<int>();
  r.step = j.at("step").get<long>();
  r.rollouts = j.at("rollouts").get<long>();
  r.applied = j.at("applied").get<bool>();
  r.mean_reward = j.at("mean_reward").get<double>();
  r.eval_reward = opt_real(j, "eval_reward");
  r.loss = real_or_nan(j, "loss");
  r.chi2 = real_or_nan(j, "chi2");
  r.lm_grad_energy = real_or_nan(j, "lm_grad_energy");
  r.c_max = real_or_nan(j, "c_max");
  r.bound_satisfied = j.at("bound_satisfied").get<bool>();
  r.global_grad_norm = real_or_nan(j, "global_grad_norm");
  r.clip_fraction = real_or_nan(j, "clip_fraction");
  r.max_ratio = real_or_nan(j, "max_ratio");
  r.min_behavior_prob = real_or_nan(j, "min_behavior_prob");
  const json& w = j.at("rwc");
  r.rwc.lm_head = real_or_nan(w, "lm_head");
  r.rwc.attn = real_or_nan(w, "attn");
  r.rwc.mlp = real_or_nan(w, "mlp");
  r.rwc.intermediate_median = real_or_nan(w, "intermediate_median");
  const json& g = j.at("gate");
  r.z = opt_real(g, "z");
  r.fired = g.at("fired").get<bool>();
  return r;
}

}  // namespace

RunMetrics load_metrics(const std::filesystem::path& path, std::string label) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open {}", path.string()));
  RunMetrics run;
  run.label = label.empty() ? path.parent_path().filename().string() : std::move(label);
  if (run.label.empty()) run.label = path.stem().string();
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "header") {
        run.regime = j.at("regime").get<std::string>();
        run.initial_eval = real_or_nan(j, "eval_reward");
      } else if (type == "step") {
        run.steps.push_back(parse_step(j));
      } else if (type == "final") {
        run.status = j.at("status").get<std::string>();
      } else {
        throw InputError("unknown record type '" + type + "'");
      }
    } catch (const std::exception& e) {
      throw InputError(fmt::format("{}:{}: malformed metrics line: {}", path.string(), lineno, e.what()));
    }
  }
  return run;
}

std::vector<CheckpointPoint> checkpoint_curve(const RunMetrics& run) {
  std::vector<CheckpointPoint> out;
  if (std::isfinite(run.initial_eval)) out.push_back({0, 0, run.initial_eval});
  for (const auto& s : run.steps)
    if (s.eval_reward) out.push_back({s.iteration + 1, s.rollouts, *s.eval_reward});
  return out;
}

double reference_performance(const RunMetrics& baseline, int last_n) {
  const auto curve = checkpoint_curve(baseline);
  if (curve.empty()) throw InputError("baseline run has no evaluation points");
  const std::size_t n = std::min<std::size_t>(curve.size(), static_cast<std::size_t>(last_n));
  double s = 0.0;
  for (std::size_t i = curve.size() - n; i < curve.size(); ++i) s += curve[i].eval_reward;
  return s / static_cast<double>(n);
}

std::optional<long> rollouts_to_reach(const RunMetrics& run, double reference) {
  for (const auto& p : checkpoint_curve(run))
    if (p.eval_reward >= reference) return p.rollouts;
  return std::nullopt;
}

double speedup_factor(double baseline_cost, double candidate_cost) {
  if (!(candidate_cost > 0.0)) throw InputError("candidate cost must be positive");
  return baseline_cost / candidate_cost;
}

double cost_reduction(double baseline_cost, double candidate_cost) {
  if (!(baseline_cost > 0.0)) throw InputError("baseline cost must be positive");
  return 1.0 - candidate_cost / baseline_cost;
}

Efficiency compare_efficiency(const RunMetrics& baseline, const RunMetrics& candidate) {
  Efficiency e;
  e.reference = reference_performance(baseline);
  e.baseline_rollouts = rollouts_to_reach(baseline, e.reference);
  e.candidate_rollouts = rollouts_to_reach(candidate, e.reference);
  if (e.baseline_rollouts && e.candidate_rollouts && *e.baseline_rollouts == *e.candidate_rollouts) {
    // Equal cost, including a reference already met before training.
    e.speedup = 1.0;
    e.reduction = 0.0;
  } else if (e.baseline_rollouts && e.candidate_rollouts && *e.baseline_rollouts > 0 &&
             *e.candidate_rollouts > 0) {
    e.speedup = speedup_factor(static_cast<double>(*e.baseline_rollouts),
                               static_cast<double>(*e.candidate_rollouts));
    e.reduction = cost_reduction(static_cast<double>(*e.baseline_rollouts),
                                 static_cast<double>(*e.candidate_rollouts));
  }
  return e;
}

std::vector<IterationView> per_iteration(const RunMetrics& run) {
  std::vector<IterationView> out;
  for (const auto& s : run.steps) {
    if (out.empty() || out.back().iteration != s.iteration) out.push_back({s.iteration, 0.0, {}});
    out.back().mean_reward = s.mean_reward;
    out.back().rwc = s.rwc;
  }
  return out;
}

std::vector<double> smoothed_reward(std::span<const IterationView> iters, int window) {
  std::vector<double> out;
  double sum = 0.0;
  for (std::size_t i = 0; i < iters.size(); ++i) {
    sum += iters[i].mean_reward;
    if (i >= static_cast<std::size_t>(window)) sum -= iters[i - static_cast<std::size_t>(window)].mean_reward;
    const std::size_t n = std::min(i + 1, static_cast<std::size_t>(window));
    out.push_back(sum / static_cast<double>(n));
  }
  return out;
}

CollapseAnalysis analyze_collapse(const RunMetrics& run, int window, double drop, double ratio) {
  const auto iters = per_iteration(run);
  const auto smooth = smoothed_reward(iters, window);
  CollapseAnalysis a;
  double peak = -1.0;
  for (std::size_t i = 0; i < iters.size(); ++i) {
    peak = std::max(peak, smooth[i]);
    if (peak > 0.0 && smooth[i] <= (1.0 - drop) * peak) a.reward_drop.push_back(iters[i].iteration);
    const auto& w = iters[i].rwc;
    if (w.lm_head > 0.0 && w.lm_head >= ratio * w.intermediate_median)
      a.lm_head_surge.push_back(iters[i].iteration);
  }
  for (long t : a.reward_drop) {
    const bool near = std::any_of(a.lm_head_surge.begin(), a.lm_head_surge.end(),
                                  [&](long u) { return std::abs(u - t) <= window; });
    if (near) {
      a.onset = t;
      break;
    }
  }
  return a;
}

std::vector<std::optional<double>> increment_zscores(std::span<const double> series, int window,
                                                     double eps) {
  std::vector<std::optional<double>> out(series.size());
  std::vector<double> inc;
  for (std::size_t t = 1; t < series.size(); ++t) {
    const double d = series[t] - series[t - 1];
    if (inc.size() >= static_cast<std::size_t>(window)) {
      const auto begin = inc.end() - window;
      double mean = 0.0;
      for (auto it = begin; it != inc.end(); ++it) mean += *it;
      mean /= window;
      double var = 0.0;
      for (auto it = begin; it != inc.end(); ++it) var += (*it - mean) * (*it - mean);
      const double sd = std::sqrt(var / window);
      out[t] = (d - mean) / (sd + eps);
    }
    inc.push_back(d);
  }
  return out;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  return out;
}

std::string cell(std::optional<double> v) { return v ? format_real(*v) : std::string(); }

}  // namespace

void write_report(const std::vector<RunMetrics>& runs, const std::filesystem::path& out_dir) {
  if (runs.empty()) throw InputError("no runs to report");
  std::filesystem::create_directories(out_dir);
  {
    auto out = open_csv(out_dir / "performance.csv", "run,iteration,rollouts,eval_reward");
    for (const auto& r : runs)
      for (const auto& p : checkpoint_curve(r))
        out << r.label << ',' << p.iteration << ',' << p.rollouts << ','
            << format_real(p.eval_reward) << '\n';
  }
  {
    auto out = open_csv(out_dir / "weight_change.csv",
                        "run,iteration,mean_reward,lm_head,attn,mlp,intermediate_median");
    for (const auto& r : runs)
      for (const auto& v : per_iteration(r))
        out << r.label << ',' << v.iteration << ',' << format_real(v.mean_reward) << ','
            << format_real(v.rwc.lm_head) << ',' << format_real(v.rwc.attn) << ','
            << format_real(v.rwc.mlp) << ',' << format_real(v.rwc.intermediate_median) << '\n';
  }
  {
    auto out = open_csv(out_dir / "monitor.csv",
                        "run,iteration,k,step,chi2,lm_grad_energy,global_grad_norm,clip_fraction,"
                        "max_ratio,z,fired");
    for (const auto& r : runs)
      for (const auto& s : r.steps)
        out << r.label << ',' << s.iteration << ',' << s.k << ',' << s.step << ','
            << format_real(s.chi2) << ',' << format_real(s.lm_grad_energy) << ','
            << format_real(s.global_grad_norm) << ',' << format_real(s.clip_fraction) << ','
            << format_real(s.max_ratio) << ',' << cell(s.z) << ',' << (s.fired ? 1 : 0) << '\n';
  }
  {
    auto out = open_csv(out_dir / "efficiency.csv",
                        "baseline,candidate,reference,baseline_rollouts,candidate_rollouts,"
                        "speedup,reduction");
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto e = compare_efficiency(runs[0], runs[i]);
      const auto n = [](std::optional<long> v) { return v ? std::to_string(*v) : std::string(); };
      out << runs[0].label << ',' << runs[i].label << ',' << format_real(e.reference) << ','
          << n(e.baseline_rollouts) << ',' << n(e.candidate_rollouts) << ',' << cell(e.speedup)
          << ',' << cell(e.reduction) << '\n';
    }
  }
}

}  // namespace grlvr
