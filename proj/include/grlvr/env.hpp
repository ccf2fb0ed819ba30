#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "grlvr/model.hpp"
#include "grlvr/rng.hpp"

namespace grlvr {

/// Fixed vocabulary layout shared by every task.
namespace vocab {
inline constexpr int kDigitCount = 10;  // tokens 0..9
inline constexpr int kQuery = 10;       // delimiter / query marker
inline constexpr int kEos = 11;
inline constexpr int kPad = 12;
inline constexpr int kFirstSymbol = 13;  // copy-task symbols occupy [13, vocab_size)
}  // namespace vocab

enum class TaskKind : std::uint8_t { modsum, copy };

std::string_view to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view s);

struct TaskConfig {
  TaskKind kind = TaskKind::modsum;
  int base = 10;
  int difficulty_min = 3;
  int difficulty_max = 5;
  int group_size = 8;
  int max_response_len = 4;

  void validate(const ModelConfig& model) const;
};

struct TaskInstance {
  std::vector<int> prompt;
  std::vector<int> target;
  TaskKind kind = TaskKind::modsum;

  bool operator==(const TaskInstance&) const = default;
};

enum class Termination : std::uint8_t { eos, max_len };

struct Trajectory {
  TaskInstance instance;
  std::vector<int> response;
  std::vector<double> logprob_old;  // temperature-1 behavior log-probs, one per response token
  int reward = 0;
  Termination terminated = Termination::max_len;

  /// prompt ++ response.
  std::vector<int> sequence() const;
  /// Tokens fed to the model: the sequence without its final token.
  std::vector<int> model_input() const;
  /// Trace position whose logits produced response token j.
  std::size_t position_of(std::size_t j) const { return instance.prompt.size() + j - 1; }
};

/// Longest prompt+response a config can produce; must fit max_seq_len + 1.
int max_sequence_tokens(const TaskConfig& cfg, int difficulty);

TaskInstance generate_instance(const TaskConfig& cfg, int difficulty, int vocab_size,
                               int max_seq_len, Rng& rng);

/// Draws a difficulty uniformly from [difficulty_min, difficulty_max] then an instance.
TaskInstance sample_instance(const TaskConfig& cfg, const ModelConfig& model, Rng& rng);

/// 1 iff the response up to (excluding) its first EOS equals the target.
int verify(const TaskInstance& instance, std::span<const int> response);

std::vector<Trajectory> rollout_group(const PolicyParams& params, const TaskInstance& instance,
                                      int group_size, double temperature, int max_response_len,
                                      Rng& rng);

/// Argmax decoding; returns the response tokens.
std::vector<int> greedy_decode(const PolicyParams& params, const TaskInstance& instance,
                               int max_response_len);

}  // namespace grlvr
