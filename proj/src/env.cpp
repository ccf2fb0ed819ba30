#include "grlvr/env.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "grlvr/error.hpp"

namespace grlvr {

std::string_view to_string(TaskKind k) { return k == TaskKind::modsum ? "modsum" : "copy"; }

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "modsum") return TaskKind::modsum;
  if (s == "copy") return TaskKind::copy;
  throw InputError(fmt::format("unknown task kind '{}'", s));
}

int max_sequence_tokens(const TaskConfig& cfg, int difficulty) {
  // Prompt: operands/symbols plus the query token.
  return difficulty + 1 + cfg.max_response_len;
}

void TaskConfig::validate(const ModelConfig& model) const {
  if (base < 2 || base > vocab::kDigitCount) throw InputError("task.base must be in [2, 10]");
  if (difficulty_min < 1 || difficulty_max < difficulty_min)
    throw InputError("task difficulty range invalid");
  if (group_size < 2) throw InputError("task.group_size must be >= 2");
  if (max_response_len < 1) throw InputError("task.max_response_len must be >= 1");
  if (model.vocab_size <= vocab::kPad) throw InputError("vocab_size too small for task layout");
  if (kind == TaskKind::copy && model.vocab_size <= vocab::kFirstSymbol)
    throw InputError("copy task needs symbols beyond the reserved tokens");
  if (kind == TaskKind::copy && max_response_len < difficulty_max + 1)
    throw InputError("copy task needs max_response_len >= difficulty_max + 1");
  if (max_sequence_tokens(*this, difficulty_max) > model.max_seq_len + 1)
    throw InputError("task does not fit in max_seq_len");
}

std::vector<int> Trajectory::sequence() const {
  std::vector<int> s = instance.prompt;
  s.insert(s.end(), response.begin(), response.end());
  return s;
}

std::vector<int> Trajectory::model_input() const {
  auto s = sequence();
  s.pop_back();
  return s;
}

TaskInstance generate_instance(const TaskConfig& cfg, int difficulty, int vocab_size,
                               int max_seq_len, Rng& rng) {
  if (difficulty < 1) throw InputError("difficulty must be >= 1");
  if (max_sequence_tokens(cfg, difficulty) > max_seq_len + 1)
    throw InputError(fmt::format("difficulty {} exceeds the sequence budget", difficulty));
  TaskInstance inst;
  inst.kind = cfg.kind;
  if (cfg.kind == TaskKind::modsum) {
    int sum = 0;
    for (int i = 0; i < difficulty; ++i) {
      const int d = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.base)));
      inst.prompt.push_back(d);
      sum += d;
    }
    inst.target = {sum % cfg.base};
  } else {
    const int n_symbols = vocab_size - vocab::kFirstSymbol;
    if (n_symbols < 1) throw InputError("copy task needs symbols beyond the reserved tokens");
    for (int i = 0; i < difficulty; ++i)
      inst.prompt.push_back(vocab::kFirstSymbol +
                            static_cast<int>(rng.below(static_cast<std::uint64_t>(n_symbols))));
    inst.target = inst.prompt;
  }
  inst.prompt.push_back(vocab::kQuery);
  return inst;
}

TaskInstance sample_instance(const TaskConfig& cfg, const ModelConfig& model, Rng& rng) {
  const auto span = static_cast<std::uint64_t>(cfg.difficulty_max - cfg.difficulty_min + 1);
  const int difficulty = cfg.difficulty_min + static_cast<int>(rng.below(span));
  return generate_instance(cfg, difficulty, model.vocab_size, model.max_seq_len, rng);
}

int verify(const TaskInstance& instance, std::span<const int> response) {
  const auto eos = std::find(response.begin(), response.end(), vocab::kEos);
  const std::span<const int> body(response.begin(), eos);
  return std::ranges::equal(body, instance.target) ? 1 : 0;
}

std::vector<Trajectory> rollout_group(const PolicyParams& params, const TaskInstance& instance,
                                      int group_size, double temperature, int max_response_len,
                                      Rng& rng) {
  if (group_size < 2) throw InputError("group_size must be >= 2");
  std::vector<Trajectory> out(static_cast<std::size_t>(group_size));
  for (auto& tr : out) {
    tr.instance = instance;
    std::vector<int> seq = instance.prompt;
    for (int step = 0; step < max_response_len; ++step) {
      const auto trace = forward(params, seq);
      const auto s = sample_token(trace.logits_at(seq.size() - 1), temperature, rng);
      tr.response.push_back(s.token);
      tr.logprob_old.push_back(s.logprob);
      seq.push_back(s.token);
      if (s.token == vocab::kEos) {
        tr.terminated = Termination::eos;
        break;
      }
    }
    tr.reward = verify(instance, tr.response);
  }
  return out;
}

std::vector<int> greedy_decode(const PolicyParams& params, const TaskInstance& instance,
                               int max_response_len) {
  std::vector<int> seq = instance.prompt;
  std::vector<int> resp;
  for (int step = 0; step < max_response_len; ++step) {
    const auto trace = forward(params, seq);
    auto z = trace.logits_at(seq.size() - 1);
    const int tok = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    resp.push_back(tok);
    seq.push_back(tok);
    if (tok == vocab::kEos) break;
  }
  return resp;
}

}  // namespace grlvr
