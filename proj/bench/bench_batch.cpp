// Serial reference loops against the OpenMP batch kernels on one toy-sized rollout batch.
#include <thread>

#include <benchmark/benchmark.h>

#include "grlvr/config.hpp"
#include "grlvr/grpo.hpp"
#include "grlvr/trainer.hpp"

namespace {

using namespace grlvr;

struct Fixture {
  RunConfig cfg;
  PolicyParams params;
  RolloutBatch batch;
  std::vector<ForwardTrace> traces;
  std::vector<TokenRecord> tokens;

  Fixture() {
    cfg.model.d_model = 32;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 4;
    cfg.model.d_ff = 64;
    cfg.model.vocab_size = 64;
    cfg.model.max_seq_len = 32;
    cfg.task.difficulty_min = 2;
    cfg.task.difficulty_max = 3;
    cfg.task.group_size = 8;
    cfg.task.max_response_len = 4;
    cfg.trainer.prompt_batch = 8;
    params = init_params(cfg.model, 0, 0.3);
    batch = collect_rollouts(params, cfg, 0);
    traces = forward_batch(params, batch);
    tokens = score_tokens(batch, traces, cfg.trainer.eps_clip);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

ExecPolicy all_threads() {
  return ExecPolicy::omp(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
}

void BM_ForwardBatchSerial(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(reference::forward_batch(f.params, f.batch));
}

void BM_ForwardBatchOmp(benchmark::State& state) {
  const auto& f = fixture();
  const auto exec = all_threads();
  for (auto _ : state) benchmark::DoNotOptimize(forward_batch(f.params, f.batch, exec));
}

void BM_GrpoGradientsSerial(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state)
    benchmark::DoNotOptimize(reference::grpo_gradients(f.params, f.batch, f.traces, f.tokens));
}

void BM_GrpoGradientsOmp(benchmark::State& state) {
  const auto& f = fixture();
  const auto exec = all_threads();
  for (auto _ : state)
    benchmark::DoNotOptimize(grpo_gradients(f.params, f.batch, f.traces, f.tokens, exec));
}

BENCHMARK(BM_ForwardBatchSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardBatchOmp)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GrpoGradientsSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GrpoGradientsOmp)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
