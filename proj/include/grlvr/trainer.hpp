#pragma once

#include <chrono>
#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "grlvr/config.hpp"
#include "grlvr/gating.hpp"
#include "grlvr/grpo.hpp"
#include "grlvr/metrics.hpp"
#include "grlvr/model.hpp"
#include "grlvr/theory.hpp"

namespace grlvr {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Weights m;
  Weights v;
  long t = 0;

  static AdamState zeros(const ModelConfig& cfg);
  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam step descending `grads`. Non-finite grads throw NumericError and
/// leave params and state untouched.
void adam_step(PolicyParams& params, const Weights& grads, AdamState& state,
               const AdamHyper& hyper);

inline constexpr char kAdamMagic[8] = {'G', 'R', 'L', 'V', 'R', 'A', 'D', '1'};

/// Same header as a model checkpoint (with its own magic), then u64 t, then m and v.
void save_adam(const std::filesystem::path& path, const ModelConfig& cfg, const AdamState& s);
AdamState load_adam(const std::filesystem::path& path, const ModelConfig& cfg);

/// ||now - prev||_F / ||ref||_F.
double relative_weight_change(const Matrix& now, const Matrix& prev, const Matrix& ref);

/// Mean relative change per component group, plus the median over every intermediate matrix.
struct ComponentChange {
  double lm_head = 0.0;
  double attn = 0.0;  // wq, wk, wv, wo of every block
  double mlp = 0.0;   // w_gate, w_up, w_down of every block
  double intermediate_median = 0.0;
};

ComponentChange component_weight_change(const Weights& now, const Weights& prev,
                                        const Weights& ref);

/// Supervised warm start: Adam on the cross-entropy of target + EOS given the prompt.
/// Returns the mean loss of the final step (0 when steps == 0).
double pretrain(PolicyParams& params, const RunConfig& cfg);

/// Cross-entropy gradient of one batch of instances (descent direction), averaged per token.
LayerGradients supervised_gradients(const PolicyParams& params,
                                    const std::vector<TaskInstance>& batch, double* loss);

/// Fixed held-out instances, derived from the seed only.
std::vector<TaskInstance> make_eval_set(const RunConfig& cfg);

/// Fraction of instances solved by greedy decoding.
double greedy_accuracy(const PolicyParams& params, const std::vector<TaskInstance>& set,
                       int max_response_len, ExecPolicy exec = {});

/// Rollouts of one outer iteration: group g uses the stream derive_seed({seed, iteration, g}).
RolloutBatch collect_rollouts(const PolicyParams& params, const RunConfig& cfg, long iteration,
                              ExecPolicy exec = {});

struct TrainState {
  PolicyParams params;
  AdamState adam;
  GateState gate;
  long iteration = 0;  // completed outer iterations
  long optimizer_steps = 0;
  long rollouts = 0;
  long gate_fires = 0;
};

struct StepRecord {
  long iteration = 0;
  int k = 1;
  long step = 0;      // optimizer steps taken so far, including this one
  long rollouts = 0;  // rollouts consumed so far, including this iteration's batch
  double mean_reward = 0.0;
  std::optional<double> eval_reward;
  double loss = 0.0;
  DivergenceReport divergence;
  double global_grad_norm = 0.0;
  double clip_fraction = 0.0;
  double mean_ratio = 1.0;
  double max_ratio = 1.0;
  double min_behavior_prob = 1.0;
  ComponentChange rwc;
  GateDecision gate;
  bool applied = false;  // an optimizer step was taken
  std::optional<Percentiles> c_struct;
  double wall_ms = 0.0;
};

JsonObject to_json(const StepRecord& r);

class Trainer {
 public:
  /// `initial` is the starting policy; it is also W_ref for relative weight change and KL.
  Trainer(RunConfig cfg, PolicyParams initial);

  const RunConfig& config() const { return cfg_; }
  const TrainState& state() const { return state_; }
  const PolicyParams& reference() const { return reference_; }

  /// Runs outer iteration state().iteration. On NumericError the state is rolled back to
  /// the iteration start and the error is rethrown.
  std::vector<StepRecord> train_iteration();

 private:
  std::vector<StepRecord> iterate();
  ExecPolicy exec() const;

  RunConfig cfg_;
  PolicyParams reference_;
  TrainState state_;
  std::deque<Weights> history_;  // params at the end of the last profile_interval iterations
};

struct RunResult {
  TrainState state;
  std::string status = "ok";  // "ok" or "numeric_abort"
  std::string error;
};

/// Full run: pretrain, then total_iterations of RL, writing into out_dir:
///   config.json, metrics.jsonl, ckpt_NNNNNN.{bin,adam,json}.
RunResult run(const RunConfig& cfg, const std::filesystem::path& out_dir);

std::string checkpoint_stem(long iteration);

}  // namespace grlvr
