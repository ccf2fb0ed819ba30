#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "grlvr/env.hpp"
#include "grlvr/model.hpp"
#include "grlvr/parallel.hpp"

namespace grlvr {

inline constexpr double kAdvantageEps = 1e-6;

/// Group-major rollouts: group g owns trajectories [g*group_size, (g+1)*group_size).
struct RolloutBatch {
  int group_size = 0;
  long behavior_params_step = 0;
  std::vector<Trajectory> trajectories;
  std::vector<double> advantages;  // one per trajectory, broadcast to its response tokens

  std::size_t group_count() const;
  std::size_t active_token_count() const;
  /// Checks group sizes, shared prompts, binary rewards and advantage alignment.
  void validate() const;
};

/// (R - mean) / (popstd + 1e-6); all zeros when popstd is exactly zero.
std::vector<double> group_advantages(std::span<const double> rewards);

/// Builds a batch from groups and fills in the advantages.
RolloutBatch make_batch(std::vector<std::vector<Trajectory>> groups, long behavior_params_step);

/// exp(logprob_new - logprob_old).
double importance_ratio(double logprob_new, double logprob_old);

/// True when min(r*A, clip(r)*A) picks the clipped branch. Ties go to the unclipped branch.
bool clip_branch_selected(double ratio, double advantage, double eps_clip);

/// E = r * A * (e_token - policy).
Vector error_signal(double ratio, double advantage, std::span<const double> policy, int token_id);

/// One active (response) token scored under the live policy.
struct TokenRecord {
  std::size_t trajectory = 0;
  std::size_t position = 0;  // trace row whose logits produced the token
  int token_id = 0;
  double logprob_old = 0.0;
  double logprob_new = 0.0;
  double ratio = 1.0;
  double advantage = 0.0;
  bool clipped = false;
  bool active = true;
};

std::vector<ForwardTrace> forward_batch(const PolicyParams& params, const RolloutBatch& batch,
                                        ExecPolicy exec = {});

/// Scores every response token in batch order (trajectory-major, then response order).
std::vector<TokenRecord> score_tokens(const RolloutBatch& batch,
                                      const std::vector<ForwardTrace>& traces, double eps_clip);

struct GrpoLoss {
  double loss = 0.0;  // clipped surrogate objective (to be maximized)
  std::vector<TokenRecord> tokens;
  std::size_t clipped_count = 0;
};

GrpoLoss grpo_loss(const RolloutBatch& batch, const std::vector<ForwardTrace>& traces,
                   double eps_clip);

struct GradientOptions {
  double kl_coef = 0.0;
  /// Reference-policy traces aligned with the batch; required when kl_coef != 0.
  const std::vector<ForwardTrace>* reference_traces = nullptr;
};

/// Per-trajectory logit gradients of the objective (rows: E_i / T for unclipped tokens,
/// zero elsewhere, plus the KL term when enabled).
Matrix trajectory_logit_grads(const RolloutBatch& batch, const ForwardTrace& trace,
                              std::span<const TokenRecord> tokens, std::size_t total_tokens,
                              const GradientOptions& opts, const ForwardTrace* reference);

/// Gradient of the objective with respect to every weight. Groups run concurrently under
/// `exec`; per-group partial sums are reduced in group order.
LayerGradients grpo_gradients(const PolicyParams& params, const RolloutBatch& batch,
                              const std::vector<ForwardTrace>& traces,
                              const std::vector<TokenRecord>& tokens, ExecPolicy exec = {},
                              const GradientOptions& opts = {});

/// (1/T) * sum over active unclipped tokens of E_i h_i^T.
Matrix lm_head_batch_gradient(const RolloutBatch& batch, const std::vector<ForwardTrace>& traces,
                              const std::vector<TokenRecord>& tokens);

/// Mean over active tokens of (log pi_theta - log pi_ref) for the sampled token.
double kl_k1(const std::vector<TokenRecord>& tokens, const std::vector<ForwardTrace>& reference);

namespace reference {
/// Plain single-threaded loops; kept as the oracle for the OpenMP paths.
std::vector<ForwardTrace> forward_batch(const PolicyParams& params, const RolloutBatch& batch);
LayerGradients grpo_gradients(const PolicyParams& params, const RolloutBatch& batch,
                              const std::vector<ForwardTrace>& traces,
                              const std::vector<TokenRecord>& tokens,
                              const GradientOptions& opts = {});
}  // namespace reference

}  // namespace grlvr
