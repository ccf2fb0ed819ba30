#include <gtest/gtest.h>

#include <cmath>

#include "grlvr/env.hpp"
#include "grlvr/error.hpp"
#include "support.hpp"

namespace grlvr {
namespace {

TEST(Modsum, TargetIsSumModuloBase) {
  TaskConfig cfg;
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    auto inst = generate_instance(cfg, 2 + i % 3, 64, 32, rng);
    ASSERT_EQ(inst.prompt.back(), vocab::kQuery);
    int sum = 0;
    for (std::size_t j = 0; j + 1 < inst.prompt.size(); ++j) {
      ASSERT_GE(inst.prompt[j], 0);
      ASSERT_LT(inst.prompt[j], cfg.base);
      sum += inst.prompt[j];
    }
    ASSERT_EQ(inst.target, std::vector<int>{sum % cfg.base});
  }
}

TEST(Modsum, HandExample) {
  TaskInstance inst{{3, 4, vocab::kQuery}, {7}, TaskKind::modsum};
  EXPECT_EQ(verify(inst, std::vector<int>{7, vocab::kEos}), 1);
  EXPECT_EQ(verify(inst, std::vector<int>{7}), 1);
  EXPECT_EQ(verify(inst, std::vector<int>{8, vocab::kEos}), 0);
}

TEST(Modsum, SmallBaseStaysInRange) {
  TaskConfig cfg;
  cfg.base = 3;
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    auto inst = generate_instance(cfg, 4, 64, 32, rng);
    for (std::size_t j = 0; j + 1 < inst.prompt.size(); ++j) EXPECT_LT(inst.prompt[j], 3);
    EXPECT_LT(inst.target[0], 3);
  }
}

TEST(Copy, TargetRepeatsPrompt) {
  TaskConfig cfg;
  cfg.kind = TaskKind::copy;
  cfg.max_response_len = 6;
  Rng rng(4);
  auto inst = generate_instance(cfg, 5, 64, 32, rng);
  ASSERT_EQ(inst.prompt.size(), 6u);
  EXPECT_EQ(inst.prompt.back(), vocab::kQuery);
  EXPECT_EQ(inst.target, std::vector<int>(inst.prompt.begin(), inst.prompt.end() - 1));
  for (int t : inst.target) {
    EXPECT_GE(t, vocab::kFirstSymbol);
    EXPECT_LT(t, 64);
  }
}

TEST(Generate, DeterministicGivenSeed) {
  TaskConfig cfg;
  Rng a(99), b(99);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(generate_instance(cfg, 3, 64, 32, a), generate_instance(cfg, 3, 64, 32, b));
}

TEST(Generate, RejectsBadDifficulty) {
  TaskConfig cfg;
  Rng rng(1);
  EXPECT_THROW(generate_instance(cfg, 0, 64, 32, rng), InputError);
  EXPECT_THROW(generate_instance(cfg, 40, 64, 32, rng), InputError);
}

TEST(Verify, Examples) {
  TaskInstance inst{{13, 14, vocab::kQuery}, {13, 14}, TaskKind::copy};
  EXPECT_EQ(verify(inst, std::vector<int>{13, 14, vocab::kEos}), 1);
  EXPECT_EQ(verify(inst, std::vector<int>{}), 0);
  EXPECT_EQ(verify(inst, std::vector<int>{13, 14, 15}), 0);
  EXPECT_EQ(verify(inst, std::vector<int>{13, vocab::kEos, 14}), 0);
  EXPECT_EQ(verify(inst, std::vector<int>{13, 14, vocab::kEos, 9, 9}), 1);
  TaskInstance empty{{vocab::kQuery}, {}, TaskKind::copy};
  EXPECT_EQ(verify(empty, std::vector<int>{}), 1);
  EXPECT_EQ(verify(empty, std::vector<int>{vocab::kEos}), 1);
}

TEST(TaskConfigValidate, Rejections) {
  ModelConfig m;
  TaskConfig t;
  EXPECT_NO_THROW(t.validate(m));
  t.base = 11;
  EXPECT_THROW(t.validate(m), InputError);
  t = TaskConfig{};
  t.group_size = 1;
  EXPECT_THROW(t.validate(m), InputError);
  t = TaskConfig{};
  t.difficulty_max = 2;
  EXPECT_THROW(t.validate(m), InputError);
  t = TaskConfig{};
  t.kind = TaskKind::copy;
  t.max_response_len = 3;
  EXPECT_THROW(t.validate(m), InputError);
  EXPECT_EQ(task_kind_from_string("copy"), TaskKind::copy);
  EXPECT_THROW(task_kind_from_string("sort"), InputError);
}

TEST(Rollout, LogprobsMatchFreshForward) {
  ModelConfig cfg;
  auto p = init_params(cfg, 3, 0.3);
  TaskConfig task;
  Rng rng(5);
  for (int g = 0; g < 4; ++g) {
    auto inst = sample_instance(task, cfg, rng);
    auto grp = rollout_group(p, inst, 4, 0.7, task.max_response_len, rng);
    ASSERT_EQ(grp.size(), 4u);
    for (const auto& tr : grp) {
      ASSERT_EQ(tr.logprob_old.size(), tr.response.size());
      EXPECT_EQ(tr.reward, verify(inst, tr.response));
      EXPECT_EQ(tr.terminated == Termination::eos, tr.response.back() == vocab::kEos);
      const auto trace = forward(p, tr.model_input());
      for (std::size_t j = 0; j < tr.response.size(); ++j) {
        const auto lp = log_softmax(trace.logits_at(tr.position_of(j)));
        EXPECT_NEAR(tr.logprob_old[j], lp[static_cast<std::size_t>(tr.response[j])], 1e-12);
      }
    }
  }
}

TEST(Rollout, DeterministicAndRejectsTinyGroups) {
  ModelConfig cfg;
  auto p = init_params(cfg, 4);
  TaskConfig task;
  Rng a(8), b(8);
  auto inst = sample_instance(task, cfg, a);
  sample_instance(task, cfg, b);
  auto ga = rollout_group(p, inst, 5, 1.0, 4, a);
  auto gb = rollout_group(p, inst, 5, 1.0, 4, b);
  for (std::size_t i = 0; i < ga.size(); ++i) {
    EXPECT_EQ(ga[i].response, gb[i].response);
    EXPECT_EQ(ga[i].logprob_old, gb[i].logprob_old);
  }
  EXPECT_THROW(rollout_group(p, inst, 1, 1.0, 4, a), InputError);
}

// lm_head aligned with the final hidden state at the query position makes EOS (the target) the
// only plausible first token, so every group member is rewarded.
TEST(Rollout, SolvedInstanceGivesUniformRewards) {
  ModelConfig cfg;
  auto p = init_params(cfg, 6);
  TaskInstance inst{{4, vocab::kQuery}, {}, TaskKind::copy};
  const auto trace = forward(p, inst.prompt);
  const auto h = trace.lm_head_input(1);
  const double n = std::sqrt(squared_norm(h));
  p.weights.lm_head.fill(0.0);
  for (std::size_t c = 0; c < h.size(); ++c) p.weights.lm_head(vocab::kEos, c) = 200.0 * h[c] / n;
  Rng rng(3);
  auto grp = rollout_group(p, inst, 4, 1.0, 4, rng);
  for (const auto& tr : grp) {
    EXPECT_EQ(tr.response, std::vector<int>{vocab::kEos});
    EXPECT_EQ(tr.reward, 1);
  }
}

TEST(Greedy, PicksArgmax) {
  ModelConfig cfg;
  auto p = init_params(cfg, 7, 0.3);
  TaskInstance inst{{1, 2, vocab::kQuery}, {3}, TaskKind::modsum};
  auto resp = greedy_decode(p, inst, 4);
  std::vector<int> seq = inst.prompt;
  for (int tok : resp) {
    const auto trace = forward(p, seq);
    auto z = trace.logits_at(seq.size() - 1);
    EXPECT_EQ(tok, static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()));
    seq.push_back(tok);
  }
  EXPECT_TRUE(resp.size() == 4u || resp.back() == vocab::kEos);
}

}  // namespace
}  // namespace grlvr
