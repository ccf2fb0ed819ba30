#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>

#include "grlvr/error.hpp"
#include "grlvr/report.hpp"

namespace grlvr {
namespace {

namespace fs = std::filesystem;

struct FakeIter {
  double reward = 0.5;
  std::optional<double> eval;
  double lm = 0.01;
  double median = 0.01;
};

std::string step_line(long it, long rollouts, const FakeIter& f) {
  return fmt::format(
      R"({{"type":"step","iteration":{},"k":1,"step":{},"rollouts":{},"applied":true,"mean_reward":{},"eval_reward":{},"loss":0,"chi2":0,"r2_mean":1,"lm_grad_energy":1,"c_max":1,"bound_satisfied":true,"global_grad_norm":1,"clip_fraction":0,"mean_ratio":1,"max_ratio":1,"min_behavior_prob":0.5,"rwc":{{"lm_head":{},"attn":0.01,"mlp":0.01,"intermediate_median":{}}},"gate":{{"step":1,"k":1,"g_t":1,"delta_g":null,"z":null,"fired":false,"reason":"pass"}},"c_struct":null,"wall_ms":1}})",
      it, it + 1, rollouts, f.reward, f.eval ? fmt::format("{}", *f.eval) : "null", f.lm, f.median);
}

fs::path write_run(const std::string& name, double eval0, const std::vector<FakeIter>& iters,
                   long rollouts_per_iter = 100) {
  const auto dir = fs::temp_directory_path() / ("grlvr_report_" + name);
  fs::create_directories(dir);
  std::ofstream out(dir / "metrics.jsonl", std::ios::trunc);
  out << fmt::format(R"({{"type":"header","regime":"dgg","seed":0,"eval_reward":{},"wall_ms":1}})", eval0)
      << '\n';
  for (std::size_t i = 0; i < iters.size(); ++i)
    out << step_line(static_cast<long>(i), rollouts_per_iter * static_cast<long>(i + 1), iters[i]) << '\n';
  out << R"({"type":"final","status":"ok","error":"","wall_ms":1})" << '\n';
  return dir / "metrics.jsonl";
}

// Eval every 10 iterations (1000 rollouts), climbing to `top` at checkpoint `reach`.
std::vector<FakeIter> climbing(int checkpoints, int reach, double top) {
  std::vector<FakeIter> v(static_cast<std::size_t>(checkpoints * 10));
  for (int c = 1; c <= checkpoints; ++c)
    v[static_cast<std::size_t>(c * 10 - 1)].eval = c >= reach ? top : top * c / (reach + 1.0);
  return v;
}

TEST(Efficiency, SpeedupExample) {
  EXPECT_DOUBLE_EQ(speedup_factor(3000, 1500), 2.0);
  EXPECT_DOUBLE_EQ(cost_reduction(3000, 1500), 0.5);
  EXPECT_THROW(speedup_factor(3000, 0), InputError);
}

TEST(Efficiency, FromMetricsStreams) {
  const auto base = load_metrics(write_run("base", 0.1, climbing(8, 3, 0.8)));
  const auto cand = load_metrics(write_run("cand", 0.1, climbing(8, 3, 0.8), 50));
  const auto e = compare_efficiency(base, cand);
  EXPECT_DOUBLE_EQ(e.reference, 0.8);
  EXPECT_EQ(*e.baseline_rollouts, 3000);
  EXPECT_EQ(*e.candidate_rollouts, 1500);
  EXPECT_DOUBLE_EQ(*e.speedup, 2.0);
  EXPECT_DOUBLE_EQ(*e.reduction, 0.5);
  const auto self = compare_efficiency(base, base);
  EXPECT_EQ(*self.speedup, 1.0);
  EXPECT_EQ(*self.reduction, 0.0);
}

TEST(Efficiency, UnreachedReferenceHasNoSpeedup) {
  const auto base = load_metrics(write_run("base2", 0.1, climbing(6, 2, 0.9)));
  const auto cand = load_metrics(write_run("cand2", 0.1, climbing(6, 2, 0.3)));
  const auto e = compare_efficiency(base, cand);
  EXPECT_FALSE(e.candidate_rollouts);
  EXPECT_FALSE(e.speedup);
}

TEST(LoadMetrics, MalformedLineNamesLineNumber) {
  const auto path = write_run("bad", 0.1, climbing(1, 1, 0.5));
  {
    std::ofstream out(path, std::ios::app);
    out << "{not json\n";
  }
  try {
    load_metrics(path);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":13:"), std::string::npos) << e.what();
  }
}

TEST(Collapse, DropWithConcurrentSurge) {
  std::vector<FakeIter> v(60);
  for (std::size_t i = 0; i < v.size(); ++i) v[i].reward = i < 30 ? 0.8 : 0.2;
  v[33].lm = 0.5;  // 50x the median
  const auto a = analyze_collapse(load_metrics(write_run("collapse", 0.1, v)));
  ASSERT_TRUE(a.onset);
  // Trailing mean over 10 first drops to <= 0.64 after three low iterations.
  EXPECT_EQ(*a.onset, 32);
  EXPECT_EQ(a.lm_head_surge, std::vector<long>{33});
}

TEST(Collapse, SurgeWithoutDropIsNotOnset) {
  std::vector<FakeIter> v(40);
  v[20].lm = 1.0;
  const auto a = analyze_collapse(load_metrics(write_run("nodrop", 0.1, v)));
  EXPECT_FALSE(a.onset);
  EXPECT_TRUE(a.reward_drop.empty());
}

TEST(IncrementZ, StepAfterFlatWindow) {
  std::vector<double> s(30);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 1.0 + 0.1 * static_cast<double>(i % 2);
  s[25] += 10.0;
  const auto z = increment_zscores(s, 20);
  for (std::size_t t = 0; t <= 20; ++t) EXPECT_FALSE(z[t]);
  ASSERT_TRUE(z[21]);
  // Alternating +-0.1 increments: mean 0 or +-0.005, std ~0.1.
  EXPECT_LT(std::abs(*z[21]), 1.5);
  EXPECT_GT(*z[25], 50.0);
}

TEST(Report, WritesCsvTables) {
  const auto base = load_metrics(write_run("csv_a", 0.1, climbing(3, 2, 0.6)), "single");
  const auto cand = load_metrics(write_run("csv_b", 0.1, climbing(3, 1, 0.6)), "dgg");
  const auto dir = fs::temp_directory_path() / "grlvr_report_csv";
  fs::remove_all(dir);
  write_report({base, cand}, dir);
  for (const char* f : {"performance.csv", "weight_change.csv", "monitor.csv", "efficiency.csv"})
    EXPECT_GT(fs::file_size(dir / f), 0u) << f;
}

}  // namespace
}  // namespace grlvr
