#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "grlvr/checkpoint.hpp"
#include "grlvr/error.hpp"
#include "grlvr/trainer.hpp"
#include "support.hpp"

namespace grlvr {
namespace {

namespace fs = std::filesystem;

RunConfig small_run(Regime regime, int iterations = 3) {
  RunConfig c;
  c.regime = regime;
  c.model = test::tiny_config();
  c.model.vocab_size = 16;
  c.model.max_seq_len = 8;
  c.init_std = 0.3;
  c.task.difficulty_min = 2;
  c.task.difficulty_max = 3;
  c.task.group_size = 4;
  c.task.max_response_len = 3;
  c.pretrain.steps = 5;
  c.pretrain.batch_size = 4;
  c.trainer.prompt_batch = 3;
  c.trainer.total_iterations = iterations;
  c.trainer.lr = 3e-3;
  c.trainer.eval_prompts = 8;
  c.trainer.profile_interval = 2;
  c.trainer.checkpoint_interval = 2;
  c.gate.window = 2;
  c.gate.tau = 0.5;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("grlvr_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Metrics lines with wall-clock fields removed; header and final lines optionally dropped.
std::vector<nlohmann::json> metrics_without_wall(const fs::path& dir, bool steps_only = false) {
  std::vector<nlohmann::json> out;
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    if (steps_only && j["type"] != "step") continue;
    out.push_back(j);
  }
  return out;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto cfg = test::tiny_config();
  auto p = test::random_params(cfg, 1);
  const auto before = p;
  auto g = Weights::zeros(cfg);
  for (double& x : g.lm_head.flat()) x = 1.0;
  AdamState st = AdamState::zeros(cfg);
  AdamHyper h;
  h.lr = 0.1;
  adam_step(p, g, st, h);
  EXPECT_NEAR(p.weights.lm_head(2, 3) - before.weights.lm_head(2, 3), -0.1 / (1 + 1e-8), 1e-14);
  EXPECT_EQ(p.weights.blocks[0].wq, before.weights.blocks[0].wq);
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, NonFiniteGradientRefusedWithoutSideEffects) {
  auto cfg = test::tiny_config();
  auto p = test::random_params(cfg, 2);
  AdamState st = AdamState::zeros(cfg);
  auto g = Weights::zeros(cfg);
  g.blocks[1].w_up(0, 0) = 1.0;
  adam_step(p, g, st, AdamHyper{});
  const auto p0 = p;
  const auto s0 = st;
  g.blocks[0].wk(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(p, g, st, AdamHyper{}), NumericError);
  EXPECT_TRUE(p == p0);
  EXPECT_TRUE(st == s0);
}

TEST(RelativeWeightChange, Examples) {
  Matrix ref(2, 2);
  ref(0, 0) = 6;
  ref(1, 1) = 8;
  Matrix a(2, 2);
  a(1, 0) = 1.5;
  EXPECT_EQ(relative_weight_change(a, a, ref), 0.0);
  Matrix b = a;
  for (std::size_t i = 0; i < 4; ++i) b.flat()[i] += ref.flat()[i];
  EXPECT_DOUBLE_EQ(relative_weight_change(b, a, ref), 1.0);
  Matrix c = a;
  c(0, 0) += 3;
  c(0, 1) += 4;
  EXPECT_DOUBLE_EQ(relative_weight_change(c, a, ref), 0.5);
  EXPECT_THROW(relative_weight_change(c, a, Matrix(2, 2)), InputError);
  EXPECT_THROW(relative_weight_change(c, Matrix(1, 2), ref), InputError);
}

TEST(RelativeWeightChange, ComponentGroups) {
  auto cfg = test::tiny_config();
  auto ref = test::random_params(cfg, 3).weights;
  auto now = ref;
  for (double& x : now.lm_head.flat()) x *= 1.5;
  auto c = component_weight_change(now, ref, ref);
  EXPECT_NEAR(c.lm_head, 0.5, 1e-15);
  EXPECT_EQ(c.attn, 0.0);
  EXPECT_EQ(c.mlp, 0.0);
  EXPECT_EQ(c.intermediate_median, 0.0);
  // Scaling one of 14 intermediate matrices moves the mean but not the median.
  now = ref;
  for (double& x : now.blocks[1].wv.flat()) x *= 3.0;
  c = component_weight_change(now, ref, ref);
  EXPECT_NEAR(c.attn, 2.0 / 8.0, 1e-15);
  EXPECT_EQ(c.intermediate_median, 0.0);
}

TEST(Checkpoint, RoundTripsParamsAndAdam) {
  auto cfg = test::tiny_config();
  auto p = test::random_params(cfg, 4);
  auto bytes = encode_checkpoint(p);
  EXPECT_TRUE(decode_checkpoint(bytes) == p);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), InputError);
  auto other = cfg;
  other.d_ff = 8;
  EXPECT_THROW(decode_checkpoint(bytes, &other), InputError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), InputError);

  AdamState st = AdamState::zeros(cfg);
  st.t = 17;
  st.m = test::random_params(cfg, 5).weights;
  st.v = test::random_params(cfg, 6).weights;
  const auto dir = scratch("adam");
  fs::create_directories(dir);
  save_adam(dir / "s.adam", cfg, st);
  EXPECT_TRUE(load_adam(dir / "s.adam", cfg) == st);
  save_checkpoint(dir / "p.bin", p);
  EXPECT_THROW(load_adam(dir / "p.bin", cfg), InputError);
  fs::remove_all(dir);
}

TEST(TrainIteration, FirstReuseStepIsOnPolicy) {
  auto cfg = small_run(Regime::naive_reuse);
  Trainer t(cfg, init_params(cfg.model, 0, cfg.init_std));
  for (int it = 0; it < 3; ++it) {
    auto recs = t.train_iteration();
    ASSERT_EQ(recs.size(), 4u);
    EXPECT_NEAR(recs[0].mean_ratio, 1.0, 1e-12);
    EXPECT_NEAR(recs[0].max_ratio, 1.0, 1e-12);
    EXPECT_EQ(recs[0].clip_fraction, 0.0);
    EXPECT_NEAR(recs[0].divergence.chi2_hat, 0.0, 1e-12);
    for (int k = 0; k < 4; ++k) {
      EXPECT_EQ(recs[static_cast<std::size_t>(k)].k, k + 1);
      EXPECT_TRUE(recs[static_cast<std::size_t>(k)].applied);
    }
  }
  EXPECT_EQ(t.state().optimizer_steps, 12);
  EXPECT_EQ(t.state().adam.t, 12);
  EXPECT_EQ(t.state().rollouts, 3 * 3 * 4);
}

TEST(TrainIteration, SingleUseTakesOneStepPerIteration) {
  auto cfg = small_run(Regime::single_use);
  Trainer t(cfg, init_params(cfg.model, 0, cfg.init_std));
  for (int it = 0; it < 4; ++it) EXPECT_EQ(t.train_iteration().size(), 1u);
  EXPECT_EQ(t.state().optimizer_steps, 4);
  EXPECT_EQ(t.state().rollouts, 4 * 3 * 4);
}

// With window 2 and a threshold below any score, iteration 0 warms up on k = 1..3 and fires
// at k = 4. The fired step must leave params and moments exactly where a K = 3 run stops.
TEST(TrainIteration, FiredStepLeavesStateUntouched) {
  auto cfg = small_run(Regime::dgg);
  cfg.gate.tau = -1e300;
  const auto init = init_params(cfg.model, 0, cfg.init_std);
  Trainer a(cfg, init);
  auto recs = a.train_iteration();
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_TRUE(recs.back().gate.fired);
  EXPECT_FALSE(recs.back().applied);
  EXPECT_EQ(a.state().gate_fires, 1);

  auto cfg3 = cfg;
  cfg3.trainer.max_reuse = 3;
  Trainer b(cfg3, init);
  b.train_iteration();
  EXPECT_TRUE(a.state().params == b.state().params);
  EXPECT_TRUE(a.state().adam == b.state().adam);
  EXPECT_EQ(a.state().optimizer_steps, 3);

  // Next iteration: k = 1 is exempt, k = 2 fires.
  recs = a.train_iteration();
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].gate.reason, GateReason::first_reuse_step);
  EXPECT_TRUE(recs[1].gate.fired);
  EXPECT_EQ(a.state().rollouts, 2 * 3 * 4);
}

// Iterations whose groups all share one reward produce zero gradients, so keep going until the
// first batch with signal overflows the parameters.
TEST(TrainIteration, NumericFailureRollsBack) {
  auto cfg = small_run(Regime::naive_reuse);
  cfg.trainer.lr = 1e308;
  Trainer t(cfg, init_params(cfg.model, 0, cfg.init_std));
  for (int it = 0; it < 50; ++it) {
    const auto before = t.state();
    try {
      t.train_iteration();
    } catch (const NumericError&) {
      EXPECT_TRUE(t.state().params == before.params);
      EXPECT_TRUE(t.state().adam == before.adam);
      EXPECT_EQ(t.state().iteration, before.iteration);
      EXPECT_EQ(t.state().rollouts, before.rollouts);
      EXPECT_EQ(t.state().optimizer_steps, before.optimizer_steps);
      return;
    }
  }
  FAIL() << "no numeric failure within 50 iterations";
}

TEST(Run, ZeroIterationsWritesHeaderAndFinalOnly) {
  auto cfg = small_run(Regime::dgg, 0);
  cfg.pretrain.steps = 0;
  const auto dir = scratch("zero");
  auto res = run(cfg, dir);
  auto lines = metrics_without_wall(dir);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0]["type"], "header");
  EXPECT_EQ(lines[1]["type"], "final");
  EXPECT_EQ(lines[1]["optimizer_steps"], 0);
  EXPECT_TRUE(res.state.params == init_params(cfg.model, cfg.seed, cfg.init_std));
  EXPECT_EQ(slurp(dir / "init.bin"), slurp(dir / "reference.bin"));
  fs::remove_all(dir);
}

TEST(Run, InfiniteThresholdMatchesNaiveReuse) {
  auto naive = small_run(Regime::naive_reuse, 4);
  auto dgg = small_run(Regime::dgg, 4);
  dgg.gate.tau = std::numeric_limits<double>::infinity();
  const auto da = scratch("naive"), db = scratch("dgg_inf");
  run(naive, da);
  run(dgg, db);
  EXPECT_EQ(metrics_without_wall(da, true), metrics_without_wall(db, true));
  EXPECT_EQ(slurp(da / "ckpt_000004.bin"), slurp(db / "ckpt_000004.bin"));
  EXPECT_EQ(slurp(da / "ckpt_000004.adam"), slurp(db / "ckpt_000004.adam"));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST(Run, SingleReuseDggMatchesSingleUse) {
  auto single = small_run(Regime::single_use, 4);
  auto dgg = small_run(Regime::dgg, 4);
  dgg.trainer.max_reuse = 1;
  dgg.gate.tau = 0.1;
  const auto da = scratch("single"), db = scratch("dgg_k1");
  run(single, da);
  run(dgg, db);
  EXPECT_EQ(metrics_without_wall(da, true), metrics_without_wall(db, true));
  EXPECT_EQ(slurp(da / "ckpt_000004.bin"), slurp(db / "ckpt_000004.bin"));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST(Run, DeterministicAcrossWorkerCounts) {
  auto cfg = small_run(Regime::dgg, 4);
  cfg.trainer.constants_interval = 2;
  cfg.trainer.constants_tokens = 8;
  const auto d1 = scratch("w1"), d1b = scratch("w1b"), d4 = scratch("w4");
  run(cfg, d1);
  run(cfg, d1b);
  cfg.trainer.workers = 4;
  run(cfg, d4);
  const auto m1 = metrics_without_wall(d1);
  EXPECT_EQ(m1, metrics_without_wall(d1b));
  auto m4 = metrics_without_wall(d4);
  EXPECT_EQ(m1, m4);
  for (const char* f : {"ckpt_000002.bin", "ckpt_000002.adam", "ckpt_000002.json", "ckpt_000004.bin",
                        "ckpt_000004.adam", "ckpt_000004.json"}) {
    EXPECT_EQ(slurp(d1 / f), slurp(d4 / f)) << f;
    EXPECT_FALSE(slurp(d1 / f).empty()) << f;
  }
  fs::remove_all(d1);
  fs::remove_all(d1b);
  fs::remove_all(d4);
}

TEST(Run, RecordsAreOrderedAndAccountingHolds) {
  auto cfg = small_run(Regime::dgg, 6);
  cfg.trainer.keep_checkpoints = 2;
  const auto dir = scratch("order");
  run(cfg, dir);
  auto steps = metrics_without_wall(dir, true);
  long prev_it = -1, prev_k = 0;
  for (const auto& s : steps) {
    const long it = s["iteration"], k = s["k"];
    EXPECT_TRUE(it > prev_it || (it == prev_it && k == prev_k + 1));
    if (it != prev_it) EXPECT_EQ(k, 1);
    EXPECT_EQ(s["rollouts"], (it + 1) * 3 * 4);
    prev_it = it;
    prev_k = k;
  }
  auto fin = metrics_without_wall(dir).back();
  EXPECT_EQ(fin["rollouts"], 6 * 3 * 4);
  EXPECT_LE(fin["optimizer_steps"].get<long>(), 6 * 4);
  EXPECT_FALSE(fs::exists(dir / "ckpt_000002.bin"));
  EXPECT_TRUE(fs::exists(dir / "ckpt_000004.bin"));
  EXPECT_TRUE(fs::exists(dir / "ckpt_000006.adam"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace grlvr
