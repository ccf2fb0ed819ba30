#pragma once

#include <exception>
#include <vector>

namespace grlvr {

/// How batch-level loops (trajectories, groups, tokens) are executed. Results are
/// bit-identical for every mode and thread count; reductions run in fixed order.
struct ExecPolicy {
  bool parallel = false;
  int threads = 1;

  static ExecPolicy serial() { return {}; }
  static ExecPolicy omp(int threads) { return {true, threads < 1 ? 1 : threads}; }
};

/// Runs body(i) for i in [0, n). Exceptions cannot cross an OpenMP region, so each index
/// records its own and the lowest failing index is rethrown, matching the serial loop.
template <class F>
void parallel_for(const ExecPolicy& exec, long n, F&& body) {
  if (!exec.parallel) {
    for (long i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n > 0 ? n : 0));
#pragma omp parallel for schedule(dynamic) num_threads(exec.threads)
  for (long i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace grlvr
