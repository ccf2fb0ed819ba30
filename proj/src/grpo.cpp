#include "grlvr/grpo.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "grlvr/error.hpp"

namespace grlvr {

std::size_t RolloutBatch::group_count() const {
  return group_size > 0 ? trajectories.size() / static_cast<std::size_t>(group_size) : 0;
}

std::size_t RolloutBatch::active_token_count() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.response.size();
  return n;
}

void RolloutBatch::validate() const {
  if (group_size < 2) throw InputError("group_size must be >= 2");
  if (trajectories.size() % static_cast<std::size_t>(group_size) != 0)
    throw InputError("batch size is not a multiple of group_size");
  if (advantages.size() != trajectories.size())
    throw InputError("advantages not aligned with trajectories");
  for (std::size_t g = 0; g < group_count(); ++g) {
    const auto& first = trajectories[g * static_cast<std::size_t>(group_size)].instance;
    for (int j = 0; j < group_size; ++j) {
      const auto& tr = trajectories[g * static_cast<std::size_t>(group_size) + j];
      if (!(tr.instance == first)) throw InputError("group members must share one prompt");
      if (tr.reward != 0 && tr.reward != 1) throw InputError("rewards must be exactly 0 or 1");
      if (tr.logprob_old.size() != tr.response.size())
        throw InputError("logprob_old not aligned with response");
    }
  }
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw InputError("group_size must be >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd == 0.0) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i)
    adv[i] = (rewards[i] - mean) / (sd + kAdvantageEps);
  return adv;
}

RolloutBatch make_batch(std::vector<std::vector<Trajectory>> groups, long behavior_params_step) {
  RolloutBatch b;
  b.behavior_params_step = behavior_params_step;
  if (groups.empty()) throw InputError("empty rollout batch");
  b.group_size = static_cast<int>(groups.front().size());
  for (auto& g : groups) {
    if (static_cast<int>(g.size()) != b.group_size)
      throw InputError("every group must have group_size trajectories");
    std::vector<double> rewards;
    for (const auto& t : g) rewards.push_back(static_cast<double>(t.reward));
    const auto adv = group_advantages(rewards);
    b.advantages.insert(b.advantages.end(), adv.begin(), adv.end());
    for (auto& t : g) b.trajectories.push_back(std::move(t));
  }
  b.validate();
  return b;
}

double importance_ratio(double logprob_new, double logprob_old) {
  if (!std::isfinite(logprob_new) || !std::isfinite(logprob_old))
    throw NumericError("importance_ratio: non-finite log-probability");
  return std::exp(logprob_new - logprob_old);
}

bool clip_branch_selected(double ratio, double advantage, double eps_clip) {
  const double clipped = std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * advantage;
  return clipped < ratio * advantage;
}

Vector error_signal(double ratio, double advantage, std::span<const double> policy, int token_id) {
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= policy.size())
    throw InputError("error_signal: token id out of range");
  const double s = ratio * advantage;
  Vector e(policy.size());
  for (std::size_t j = 0; j < policy.size(); ++j) e[j] = -s * policy[j];
  e[static_cast<std::size_t>(token_id)] += s;
  return e;
}

std::vector<ForwardTrace> forward_batch(const PolicyParams& params, const RolloutBatch& batch,
                                        ExecPolicy exec) {
  std::vector<ForwardTrace> traces(batch.trajectories.size());
  const auto n = static_cast<long>(traces.size());
  parallel_for(exec, n, [&](long i) {
    const auto input = batch.trajectories[static_cast<std::size_t>(i)].model_input();
    traces[static_cast<std::size_t>(i)] = forward(params, input);
  });
  return traces;
}

std::vector<TokenRecord> score_tokens(const RolloutBatch& batch,
                                      const std::vector<ForwardTrace>& traces, double eps_clip) {
  if (traces.size() != batch.trajectories.size())
    throw InputError("traces not aligned with batch");
  std::vector<TokenRecord> out;
  out.reserve(batch.active_token_count());
  for (std::size_t t = 0; t < batch.trajectories.size(); ++t) {
    const auto& tr = batch.trajectories[t];
    for (std::size_t j = 0; j < tr.response.size(); ++j) {
      TokenRecord rec;
      rec.trajectory = t;
      rec.position = tr.position_of(j);
      rec.token_id = tr.response[j];
      rec.logprob_old = tr.logprob_old[j];
      rec.logprob_new = log_softmax(traces[t].logits_at(rec.position))[static_cast<std::size_t>(rec.token_id)];
      rec.ratio = importance_ratio(rec.logprob_new, rec.logprob_old);
      rec.advantage = batch.advantages[t];
      rec.clipped = clip_branch_selected(rec.ratio, rec.advantage, eps_clip);
      out.push_back(rec);
    }
  }
  return out;
}

GrpoLoss grpo_loss(const RolloutBatch& batch, const std::vector<ForwardTrace>& traces,
                   double eps_clip) {
  if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw InputError("eps_clip must be in (0, 1)");
  GrpoLoss out;
  out.tokens = score_tokens(batch, traces, eps_clip);
  std::size_t active = 0;
  double sum = 0.0;
  for (const auto& t : out.tokens) {
    if (!t.active) continue;
    ++active;
    const double unclipped = t.ratio * t.advantage;
    const double clipped = std::clamp(t.ratio, 1.0 - eps_clip, 1.0 + eps_clip) * t.advantage;
    sum += std::min(unclipped, clipped);
    if (t.clipped) ++out.clipped_count;
  }
  if (active == 0) throw InputError("empty active set");
  out.loss = sum / static_cast<double>(active);
  return out;
}

namespace {

std::size_t count_active(const std::vector<TokenRecord>& tokens) {
  return static_cast<std::size_t>(
      std::count_if(tokens.begin(), tokens.end(), [](const auto& t) { return t.active; }));
}

// [begin, end) offsets into `tokens` for every trajectory.
std::vector<std::size_t> token_offsets(const RolloutBatch& batch,
                                       const std::vector<TokenRecord>& tokens) {
  std::vector<std::size_t> off(batch.trajectories.size() + 1, 0);
  for (const auto& t : tokens) {
    if (t.trajectory >= batch.trajectories.size()) throw InputError("token record out of range");
    ++off[t.trajectory + 1];
  }
  for (std::size_t i = 1; i < off.size(); ++i) off[i] += off[i - 1];
  return off;
}

void check_grad_inputs(const RolloutBatch& batch, const std::vector<ForwardTrace>& traces,
                       const std::vector<TokenRecord>& tokens, const GradientOptions& opts) {
  if (traces.size() != batch.trajectories.size()) throw InputError("traces not aligned with batch");
  if (count_active(tokens) == 0) throw InputError("empty active set");
  if (opts.kl_coef != 0.0 &&
      (!opts.reference_traces || opts.reference_traces->size() != traces.size()))
    throw InputError("kl_coef != 0 requires aligned reference traces");
}

void accumulate_group(const PolicyParams& params, const RolloutBatch& batch,
                      const std::vector<ForwardTrace>& traces,
                      const std::vector<TokenRecord>& tokens,
                      const std::vector<std::size_t>& offsets, std::size_t total,
                      const GradientOptions& opts, std::size_t group, Weights& out) {
  const auto gs = static_cast<std::size_t>(batch.group_size);
  for (std::size_t t = group * gs; t < (group + 1) * gs; ++t) {
    std::span<const TokenRecord> mine(tokens.data() + offsets[t], offsets[t + 1] - offsets[t]);
    const ForwardTrace* ref = opts.reference_traces ? &(*opts.reference_traces)[t] : nullptr;
    const Matrix dz = trajectory_logit_grads(batch, traces[t], mine, total, opts, ref);
    backward_accumulate(params, traces[t], dz, out);
  }
}

}  // namespace

Matrix trajectory_logit_grads(const RolloutBatch& /*batch*/, const ForwardTrace& trace,
                              std::span<const TokenRecord> tokens, std::size_t total_tokens,
                              const GradientOptions& opts, const ForwardTrace* reference) {
  Matrix dz(trace.length(), trace.logits.cols());
  const double inv_t = 1.0 / static_cast<double>(total_tokens);
  for (const auto& tok : tokens) {
    if (!tok.active) continue;
    auto row = dz.row(tok.position);
    auto pi = trace.policy_at(tok.position);
    if (!tok.clipped) {
      const auto e = error_signal(tok.ratio, tok.advantage, pi, tok.token_id);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += e[j] * inv_t;
    }
    if (opts.kl_coef != 0.0 && reference) {
      // d/dz of -kl_coef * (log pi(a) - log pi_ref(a)) / T.
      const double c = -opts.kl_coef * inv_t;
      for (std::size_t j = 0; j < row.size(); ++j) row[j] -= c * pi[j];
      row[static_cast<std::size_t>(tok.token_id)] += c;
    }
  }
  return dz;
}

LayerGradients grpo_gradients(const PolicyParams& params, const RolloutBatch& batch,
                              const std::vector<ForwardTrace>& traces,
                              const std::vector<TokenRecord>& tokens, ExecPolicy exec,
                              const GradientOptions& opts) {
  check_grad_inputs(batch, traces, tokens, opts);
  const auto offsets = token_offsets(batch, tokens);
  const std::size_t total = count_active(tokens);
  const std::size_t n_groups = batch.group_count();
  std::vector<Weights> partial(n_groups, Weights::zeros(params.config));
  const auto ng = static_cast<long>(n_groups);
  parallel_for(exec, ng, [&](long g) {
    accumulate_group(params, batch, traces, tokens, offsets, total, opts,
                     static_cast<std::size_t>(g), partial[static_cast<std::size_t>(g)]);
  });
  LayerGradients out{Weights::zeros(params.config)};
  for (const auto& p : partial) axpy(out.weights, 1.0, p);
  return out;
}

Matrix lm_head_batch_gradient(const RolloutBatch& batch, const std::vector<ForwardTrace>& traces,
                              const std::vector<TokenRecord>& tokens) {
  if (traces.size() != batch.trajectories.size()) throw InputError("traces not aligned with batch");
  const std::size_t total = count_active(tokens);
  if (total == 0) throw InputError("empty active set");
  const auto& first = traces.front();
  Matrix g(first.logits.cols(), first.lm_input.cols());
  for (const auto& tok : tokens) {
    if (!tok.active || tok.clipped) continue;
    const auto& tr = traces[tok.trajectory];
    const auto e = error_signal(tok.ratio, tok.advantage, tr.policy_at(tok.position), tok.token_id);
    outer_acc(g, e, tr.lm_head_input(tok.position));
  }
  const double inv_t = 1.0 / static_cast<double>(total);
  for (double& x : g.flat()) x *= inv_t;
  return g;
}

double kl_k1(const std::vector<TokenRecord>& tokens, const std::vector<ForwardTrace>& reference) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& t : tokens) {
    if (!t.active) continue;
    const auto lp_ref = log_softmax(reference.at(t.trajectory).logits_at(t.position));
    s += t.logprob_new - lp_ref[static_cast<std::size_t>(t.token_id)];
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

namespace reference {

std::vector<ForwardTrace> forward_batch(const PolicyParams& params, const RolloutBatch& batch) {
  std::vector<ForwardTrace> traces;
  traces.reserve(batch.trajectories.size());
  for (const auto& tr : batch.trajectories) traces.push_back(forward(params, tr.model_input()));
  return traces;
}

LayerGradients grpo_gradients(const PolicyParams& params, const RolloutBatch& batch,
                              const std::vector<ForwardTrace>& traces,
                              const std::vector<TokenRecord>& tokens,
                              const GradientOptions& opts) {
  check_grad_inputs(batch, traces, tokens, opts);
  const auto offsets = token_offsets(batch, tokens);
  const std::size_t total = count_active(tokens);
  LayerGradients out{Weights::zeros(params.config)};
  for (std::size_t g = 0; g < batch.group_count(); ++g) {
    Weights partial = Weights::zeros(params.config);
    accumulate_group(params, batch, traces, tokens, offsets, total, opts, g, partial);
    axpy(out.weights, 1.0, partial);
  }
  return out;
}

}  // namespace reference

}  // namespace grlvr
