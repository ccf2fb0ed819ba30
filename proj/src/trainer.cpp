#include "grlvr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <fmt/format.h>

#include "grlvr/checkpoint.hpp"
#include "grlvr/error.hpp"

namespace grlvr {

using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

AdamState AdamState::zeros(const ModelConfig& cfg) {
  return {Weights::zeros(cfg), Weights::zeros(cfg), 0};
}

void adam_step(PolicyParams& params, const Weights& grads, AdamState& state,
               const AdamHyper& hyper) {
  if (!(hyper.lr > 0.0)) throw InputError("learning rate must be positive");
  if (!grads.same_shape(params.weights) || !state.m.same_shape(params.weights) ||
      !state.v.same_shape(params.weights))
    throw InputError("adam: shape mismatch");
  if (!grads.all_finite()) throw NumericError("adam: non-finite gradient");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  auto p = params.weights.tensors();
  const auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pf = p[i].tensor->flat();
    const auto gf = g[i].tensor->flat();
    auto mf = m[i].tensor->flat();
    auto vf = v[i].tensor->flat();
    for (std::size_t j = 0; j < pf.size(); ++j) {
      mf[j] = hyper.beta1 * mf[j] + (1.0 - hyper.beta1) * gf[j];
      vf[j] = hyper.beta2 * vf[j] + (1.0 - hyper.beta2) * gf[j] * gf[j];
      pf[j] -= hyper.lr * (mf[j] / bc1) / (std::sqrt(vf[j] / bc2) + hyper.eps);
    }
  }
}

void save_adam(const std::filesystem::path& path, const ModelConfig& cfg, const AdamState& s) {
  std::string bytes = encode_config_header(kAdamMagic, cfg);
  put_u64(bytes, static_cast<std::uint64_t>(s.t));
  append_weights(bytes, s.m);
  append_weights(bytes, s.v);
  write_file(path, bytes);
}

AdamState load_adam(const std::filesystem::path& path, const ModelConfig& cfg) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic(kAdamMagic);
  if (!(r.config() == cfg)) throw InputError("optimizer state config mismatch");
  AdamState s = AdamState::zeros(cfg);
  s.t = static_cast<long>(r.u64());
  r.read_weights(s.m);
  r.read_weights(s.v);
  if (!r.at_end()) throw InputError("trailing bytes in optimizer state");
  return s;
}

double relative_weight_change(const Matrix& now, const Matrix& prev, const Matrix& ref) {
  if (!now.same_shape(prev) || !now.same_shape(ref)) throw InputError("shape mismatch");
  const double denom = std::sqrt(frobenius_sq(ref));
  if (denom == 0.0) throw InputError("reference weight has zero norm");
  double num = 0.0;
  const auto a = now.flat();
  const auto b = prev.flat();
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num) / denom;
}

ComponentChange component_weight_change(const Weights& now, const Weights& prev,
                                        const Weights& ref) {
  ComponentChange c;
  c.lm_head = relative_weight_change(now.lm_head, prev.lm_head, ref.lm_head);
  std::vector<double> all;
  double attn = 0.0;
  double mlp = 0.0;
  int n_attn = 0;
  int n_mlp = 0;
  for (std::size_t b = 0; b < now.blocks.size(); ++b) {
    for (LayerKind kind : kLayerKinds) {
      const double r = relative_weight_change(now.blocks[b].linear(kind),
                                              prev.blocks[b].linear(kind),
                                              ref.blocks[b].linear(kind));
      all.push_back(r);
      if (kind == LayerKind::gate || kind == LayerKind::up || kind == LayerKind::down) {
        mlp += r;
        ++n_mlp;
      } else {
        attn += r;
        ++n_attn;
      }
    }
  }
  c.attn = n_attn ? attn / n_attn : 0.0;
  c.mlp = n_mlp ? mlp / n_mlp : 0.0;
  c.intermediate_median = all.empty() ? 0.0 : quantile(all, 0.5);
  return c;
}

LayerGradients supervised_gradients(const PolicyParams& params,
                                    const std::vector<TaskInstance>& batch, double* loss) {
  std::size_t n_tokens = 0;
  for (const auto& inst : batch) n_tokens += inst.target.size() + 1;
  if (n_tokens == 0) throw InputError("empty supervised batch");
  const double inv = 1.0 / static_cast<double>(n_tokens);
  LayerGradients out{Weights::zeros(params.config)};
  double total = 0.0;
  for (const auto& inst : batch) {
    std::vector<int> seq = inst.prompt;
    seq.insert(seq.end(), inst.target.begin(), inst.target.end());
    seq.push_back(vocab::kEos);
    const std::vector<int> input(seq.begin(), seq.end() - 1);
    const auto trace = forward(params, input);
    Matrix dz(trace.length(), static_cast<std::size_t>(params.config.vocab_size));
    for (std::size_t pos = inst.prompt.size() - 1; pos < input.size(); ++pos) {
      const int y = seq[pos + 1];
      const auto pi = trace.policy_at(pos);
      total -= log_softmax(trace.logits_at(pos))[static_cast<std::size_t>(y)];
      for (std::size_t j = 0; j < pi.size(); ++j)
        dz(pos, j) = (pi[j] - (static_cast<int>(j) == y ? 1.0 : 0.0)) * inv;
    }
    backward_accumulate(params, trace, dz, out.weights);
  }
  if (loss) *loss = total * inv;
  return out;
}

double pretrain(PolicyParams& params, const RunConfig& cfg) {
  const auto& pc = cfg.pretrain;
  if (pc.steps == 0) return 0.0;
  AdamState adam = AdamState::zeros(cfg.model);
  AdamHyper hyper;
  hyper.lr = pc.lr;
  double loss = 0.0;
  for (int step = 0; step < pc.steps; ++step) {
    Rng rng(derive_seed({cfg.seed, 0x70726574ULL, static_cast<std::uint64_t>(step)}));
    std::vector<TaskInstance> batch;
    for (int i = 0; i < pc.batch_size; ++i) batch.push_back(sample_instance(cfg.task, cfg.model, rng));
    const auto grads = supervised_gradients(params, batch, &loss);
    adam_step(params, grads.weights, adam, hyper);
  }
  if (!params.weights.all_finite()) throw NumericError("pretraining diverged");
  return loss;
}

std::vector<TaskInstance> make_eval_set(const RunConfig& cfg) {
  Rng rng(derive_seed({cfg.seed, 0x6576616cULL}));
  std::vector<TaskInstance> set;
  for (int i = 0; i < cfg.trainer.eval_prompts; ++i)
    set.push_back(sample_instance(cfg.task, cfg.model, rng));
  return set;
}

double greedy_accuracy(const PolicyParams& params, const std::vector<TaskInstance>& set,
                       int max_response_len, ExecPolicy exec) {
  if (set.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<int> solved(set.size(), 0);
  parallel_for(exec, static_cast<long>(set.size()), [&](long i) {
    const auto& inst = set[static_cast<std::size_t>(i)];
    solved[static_cast<std::size_t>(i)] =
        verify(inst, greedy_decode(params, inst, max_response_len));
  });
  long total = 0;
  for (int s : solved) total += s;
  return static_cast<double>(total) / static_cast<double>(set.size());
}

RolloutBatch collect_rollouts(const PolicyParams& params, const RunConfig& cfg, long iteration,
                              ExecPolicy exec) {
  const int groups = cfg.trainer.prompt_batch;
  std::vector<std::vector<Trajectory>> out(static_cast<std::size_t>(groups));
  parallel_for(exec, groups, [&](long g) {
    Rng rng(derive_seed({cfg.seed, 0x726f6c6cULL, static_cast<std::uint64_t>(iteration),
                         static_cast<std::uint64_t>(g)}));
    const auto inst = sample_instance(cfg.task, cfg.model, rng);
    out[static_cast<std::size_t>(g)] =
        rollout_group(params, inst, cfg.task.group_size, cfg.trainer.temperature,
                      cfg.task.max_response_len, rng);
  });
  return make_batch(std::move(out), 0);
}

JsonObject to_json(const StepRecord& r) {
  JsonObject rwc;
  rwc.field("lm_head", r.rwc.lm_head)
      .field("attn", r.rwc.attn)
      .field("mlp", r.rwc.mlp)
      .field("intermediate_median", r.rwc.intermediate_median);
  JsonObject gate;
  gate.field("step", r.step)
      .field("k", r.k)
      .field("g_t", r.divergence.lm_grad_energy)
      .field("delta_g", r.gate.delta_g)
      .field("z", r.gate.z_score)
      .field("fired", r.gate.fired)
      .field("reason", to_string(r.gate.reason));
  JsonObject o;
  o.field("type", "step")
      .field("iteration", r.iteration)
      .field("k", r.k)
      .field("step", r.step)
      .field("rollouts", r.rollouts)
      .field("applied", r.applied)
      .field("mean_reward", r.mean_reward)
      .field("eval_reward", r.eval_reward)
      .field("loss", r.loss)
      .field("chi2", r.divergence.chi2_hat)
      .field("r2_mean", r.divergence.r2_mean)
      .field("lm_grad_energy", r.divergence.lm_grad_energy)
      .field("c_max", r.divergence.c_max)
      .field("bound_satisfied", r.divergence.bound_satisfied)
      .field("global_grad_norm", r.global_grad_norm)
      .field("clip_fraction", r.clip_fraction)
      .field("mean_ratio", r.mean_ratio)
      .field("max_ratio", r.max_ratio)
      .field("min_behavior_prob", r.min_behavior_prob)
      .field("rwc", rwc)
      .field("gate", gate);
  if (r.c_struct) {
    JsonObject cs;
    cs.field("median", r.c_struct->median).field("p95", r.c_struct->p95);
    o.field("c_struct", cs);
  } else {
    o.raw("c_struct", "null");
  }
  o.field("wall_ms", r.wall_ms);
  return o;
}

Trainer::Trainer(RunConfig cfg, PolicyParams initial)
    : cfg_(std::move(cfg)), reference_(std::move(initial)) {
  cfg_.validate();
  if (!(reference_.config == cfg_.model)) throw InputError("initial params do not match config");
  state_.params = reference_;
  state_.adam = AdamState::zeros(cfg_.model);
}

ExecPolicy Trainer::exec() const {
  return cfg_.trainer.workers > 1 ? ExecPolicy::omp(cfg_.trainer.workers) : ExecPolicy::serial();
}

std::vector<StepRecord> Trainer::train_iteration() {
  const TrainState saved = state_;
  try {
    auto recs = iterate();
    history_.push_back(state_.params.weights);
    while (history_.size() > static_cast<std::size_t>(cfg_.trainer.profile_interval))
      history_.pop_front();
    return recs;
  } catch (const NumericError&) {
    state_ = saved;
    throw;
  }
}

std::vector<StepRecord> Trainer::iterate() {
  const auto& tc = cfg_.trainer;
  const ExecPolicy ex = exec();
  auto t0 = Clock::now();

  RolloutBatch batch = collect_rollouts(state_.params, cfg_, state_.iteration, ex);
  batch.behavior_params_step = state_.optimizer_steps;
  state_.rollouts += static_cast<long>(batch.trajectories.size());

  double reward_sum = 0.0;
  double min_prob = 1.0;
  for (const auto& tr : batch.trajectories) {
    reward_sum += tr.reward;
    for (double lp : tr.logprob_old) min_prob = std::min(min_prob, std::exp(lp));
  }
  const double mean_reward = reward_sum / static_cast<double>(batch.trajectories.size());

  const bool use_kl = tc.kl_coef != 0.0;
  std::vector<ForwardTrace> ref_traces;
  if (use_kl) ref_traces = forward_batch(reference_, batch, ex);

  // Outside the dgg regime the gate still scores every step but can never fire.
  GateConfig gcfg = cfg_.gate;
  if (cfg_.regime != Regime::dgg) gcfg.tau = std::numeric_limits<double>::infinity();

  const Weights& prev = history_.size() >= static_cast<std::size_t>(tc.profile_interval)
                            ? history_.front()
                            : reference_.weights;
  const AdamHyper hyper{tc.lr, tc.beta1, tc.beta2, tc.adam_eps};

  std::vector<StepRecord> records;
  const int reuse = cfg_.effective_reuse();
  for (int k = 1; k <= reuse; ++k) {
    StepRecord rec;
    rec.iteration = state_.iteration;
    rec.k = k;
    rec.rollouts = state_.rollouts;
    rec.mean_reward = mean_reward;
    rec.min_behavior_prob = min_prob;

    const auto traces = forward_batch(state_.params, batch, ex);
    const GrpoLoss loss = grpo_loss(batch, traces, tc.eps_clip);
    rec.loss = loss.loss;
    const GradientOptions opts{tc.kl_coef, use_kl ? &ref_traces : nullptr};
    LayerGradients grads = grpo_gradients(state_.params, batch, traces, loss.tokens, ex, opts);
    const double g_t = grads.lm_head_energy();
    const double lm_energy =
        use_kl ? frobenius_sq(lm_head_batch_gradient(batch, traces, loss.tokens)) : g_t;
    rec.divergence = divergence_report(traces, loss.tokens, lm_energy);
    rec.global_grad_norm = std::sqrt(grads.global_energy());

    double ratio_sum = 0.0;
    double ratio_max = 0.0;
    std::size_t n = 0;
    for (const auto& t : loss.tokens) {
      if (!t.active) continue;
      ++n;
      ratio_sum += t.ratio;
      ratio_max = std::max(ratio_max, t.ratio);
    }
    rec.mean_ratio = ratio_sum / static_cast<double>(n);
    rec.max_ratio = ratio_max;
    rec.clip_fraction = static_cast<double>(loss.clipped_count) / static_cast<double>(n);

    if (k == 1 && tc.constants_interval > 0 && state_.iteration % tc.constants_interval == 0) {
      std::vector<TokenSite> sites;
      const std::size_t stride =
          std::max<std::size_t>(1, n / static_cast<std::size_t>(tc.constants_tokens));
      std::size_t idx = 0;
      for (const auto& t : loss.tokens) {
        if (!t.active) continue;
        if (idx++ % stride == 0 && sites.size() < static_cast<std::size_t>(tc.constants_tokens))
          sites.push_back({t.trajectory, t.position, t.token_id});
      }
      const auto sample = measure_constants(state_.params, traces, sites, ex);
      rec.c_struct = percentile_report(sample.token_c_struct);
    }

    rec.gate = observe(state_.gate, gcfg, g_t, k);
    if (rec.gate.fired) {
      ++state_.gate_fires;
      rec.step = state_.optimizer_steps;
      rec.rwc = component_weight_change(state_.params.weights, prev, reference_.weights);
      rec.wall_ms = ms_since(t0);
      records.push_back(rec);
      break;
    }
    scale(grads.weights, -1.0);  // the surrogate is maximized
    adam_step(state_.params, grads.weights, state_.adam, hyper);
    if (!state_.params.weights.all_finite()) throw NumericError("non-finite parameters after update");
    ++state_.optimizer_steps;
    rec.applied = true;
    rec.step = state_.optimizer_steps;
    rec.rwc = component_weight_change(state_.params.weights, prev, reference_.weights);
    rec.wall_ms = ms_since(t0);
    t0 = Clock::now();
    records.push_back(rec);
  }
  ++state_.iteration;
  return records;
}

std::string checkpoint_stem(long iteration) { return fmt::format("ckpt_{:06d}", iteration); }

namespace {

void write_sidecar(const std::filesystem::path& path, const TrainState& s) {
  std::string inc = "[";
  for (std::size_t i = 0; i < s.gate.increments.size(); ++i) {
    if (i) inc += ',';
    inc += format_real(s.gate.increments[i]);
  }
  inc += "]";
  JsonObject gate;
  gate.field("steps_observed", s.gate.steps_observed)
      .field("last_energy", s.gate.last_energy)
      .raw("increments", inc);
  JsonObject o;
  o.field("iteration", s.iteration)
      .field("optimizer_steps", s.optimizer_steps)
      .field("rollouts", s.rollouts)
      .field("gate_fires", s.gate_fires)
      .field("adam_t", s.adam.t)
      .field("params_file", checkpoint_stem(s.iteration) + ".bin")
      .field("adam_file", checkpoint_stem(s.iteration) + ".adam")
      .field("gate", gate);
  write_file(path, o.str() + "\n");
}

void save_training_checkpoint(const std::filesystem::path& dir, const TrainState& s) {
  const std::string stem = checkpoint_stem(s.iteration);
  save_checkpoint(dir / (stem + ".bin"), s.params);
  save_adam(dir / (stem + ".adam"), s.params.config, s.adam);
  write_sidecar(dir / (stem + ".json"), s);
}

void remove_training_checkpoint(const std::filesystem::path& dir, long iteration) {
  const std::string stem = checkpoint_stem(iteration);
  for (const char* ext : {".bin", ".adam", ".json"}) std::filesystem::remove(dir / (stem + ext));
}

}  // namespace

RunResult run(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto t_start = Clock::now();
  std::filesystem::create_directories(out_dir);
  write_file(out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  MetricsWriter metrics(out_dir / "metrics.jsonl");

  const auto& tc = cfg.trainer;
  const ExecPolicy ex = tc.workers > 1 ? ExecPolicy::omp(tc.workers) : ExecPolicy::serial();
  PolicyParams params = init_params(cfg.model, cfg.seed, cfg.init_std);
  save_checkpoint(out_dir / "init.bin", params);
  const double pretrain_loss = pretrain(params, cfg);
  save_checkpoint(out_dir / "reference.bin", params);

  const auto eval_set = make_eval_set(cfg);
  const double eval0 = greedy_accuracy(params, eval_set, cfg.task.max_response_len, ex);

  JsonObject header;
  header.field("type", "header")
      .field("regime", to_string(cfg.regime))
      .field("seed", cfg.seed)
      .field("max_reuse", cfg.effective_reuse())
      .field("total_iterations", tc.total_iterations)
      .field("parameter_count", params.weights.parameter_count())
      .field("pretrain_loss", pretrain_loss)
      .field("eval_reward", eval0)
      .field("wall_ms", ms_since(t_start));
  metrics.write(header);

  Trainer trainer(cfg, params);
  RunResult result;
  std::deque<long> kept;
  for (int it = 0; it < tc.total_iterations; ++it) {
    std::vector<StepRecord> recs;
    try {
      recs = trainer.train_iteration();
    } catch (const NumericError& e) {
      result.status = "numeric_abort";
      result.error = e.what();
      break;
    }
    const long done = trainer.state().iteration;
    if (done % tc.checkpoint_interval == 0 || done == tc.total_iterations) {
      recs.back().eval_reward =
          greedy_accuracy(trainer.state().params, eval_set, cfg.task.max_response_len, ex);
      save_training_checkpoint(out_dir, trainer.state());
      kept.push_back(done);
      if (tc.keep_checkpoints > 0 && kept.size() > static_cast<std::size_t>(tc.keep_checkpoints)) {
        remove_training_checkpoint(out_dir, kept.front());
        kept.pop_front();
      }
    }
    for (const auto& r : recs) metrics.write(to_json(r));
  }
  result.state = trainer.state();

  JsonObject fin;
  fin.field("type", "final")
      .field("status", result.status)
      .field("error", result.error)
      .field("iterations", result.state.iteration)
      .field("optimizer_steps", result.state.optimizer_steps)
      .field("rollouts", result.state.rollouts)
      .field("gate_fires", result.state.gate_fires)
      .field("wall_ms", ms_since(t_start));
  metrics.write(fin);
  return result;
}

}  // namespace grlvr
