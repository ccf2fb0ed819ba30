#include "grlvr/gating.hpp"

#include <cmath>

#include "grlvr/error.hpp"

namespace grlvr {

void GateConfig::validate() const {
  if (window < 2) throw InputError("gate.window must be >= 2");
  if (!(epsilon > 0.0)) throw InputError("gate.epsilon must be > 0");
  if (std::isnan(tau)) throw InputError("gate.tau must be a number");
}

std::string_view to_string(GateReason r) {
  switch (r) {
    case GateReason::pass: return "pass";
    case GateReason::window_warmup: return "window_warmup";
    case GateReason::first_reuse_step: return "first_reuse_step";
    case GateReason::anomaly: return "anomaly";
  }
  return "?";
}

WindowStats window_stats(const std::deque<double>& window) {
  WindowStats s;
  if (window.empty()) return s;
  const double n = static_cast<double>(window.size());
  for (double x : window) s.mean += x;
  s.mean /= n;
  double var = 0.0;
  for (double x : window) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / n);
  return s;
}

GateDecision observe(GateState& state, const GateConfig& cfg, double g_t, int reuse_index) {
  if (!std::isfinite(g_t) || g_t < 0.0) throw InputError("gate: g_t must be finite and >= 0");
  if (reuse_index < 1) throw InputError("gate: reuse index must be >= 1");
  GateDecision d;
  if (!state.last_energy) {
    state.last_energy = g_t;
    d.reason = GateReason::window_warmup;
    return d;
  }
  const double delta = g_t - *state.last_energy;
  d.delta_g = delta;
  const bool warmed = state.steps_observed >= cfg.window;
  if (warmed) {
    const auto st = window_stats(state.increments);
    d.z_score = (delta - st.mean) / (st.stddev + cfg.epsilon);
  }
  if (!warmed) {
    d.reason = GateReason::window_warmup;
  } else if (reuse_index == 1) {
    d.reason = GateReason::first_reuse_step;
  } else if (*d.z_score > cfg.tau) {
    d.fired = true;
    d.reason = GateReason::anomaly;
    return d;
  }
  state.increments.push_back(delta);
  while (state.increments.size() > static_cast<std::size_t>(cfg.window))
    state.increments.pop_front();
  state.last_energy = g_t;
  ++state.steps_observed;
  return d;
}

LayerGradients apply_decision(const GateDecision& decision, LayerGradients grads) {
  if (decision.fired)
    for (auto& t : grads.weights.tensors()) t.tensor->fill(0.0);
  return grads;
}

}  // namespace grlvr
