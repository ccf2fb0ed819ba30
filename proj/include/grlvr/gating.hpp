#pragma once

#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <string_view>

#include "grlvr/model.hpp"

namespace grlvr {

/// Dynamic gradient gating: a Z-score test on step-to-step increments of the lm_head
/// gradient energy g_t = ||G^lm||_F^2.
struct GateConfig {
  double tau = 0.5;
  int window = 20;
  double epsilon = 1e-8;

  void validate() const;
};

struct GateState {
  std::deque<double> increments;  // at most `window` past increments, oldest first
  std::optional<double> last_energy;
  long steps_observed = 0;  // increments pushed so far

  bool operator==(const GateState&) const = default;
};

enum class GateReason : std::uint8_t { pass, window_warmup, first_reuse_step, anomaly };

std::string_view to_string(GateReason r);

struct GateDecision {
  std::optional<double> z_score;  // empty while the window is filling or with no previous g
  std::optional<double> delta_g;
  bool fired = false;
  GateReason reason = GateReason::pass;
};

/// Population mean / standard deviation of the window contents.
struct WindowStats {
  double mean = 0.0;
  double stddev = 0.0;
};
WindowStats window_stats(const std::deque<double>& window);

/// Scores g_t against the statistics of the stored increments (never including the current
/// one) and fires iff the window is full, reuse_index > 1 and z > tau. A fired observation
/// leaves the state untouched; any other observation is pushed into the window.
GateDecision observe(GateState& state, const GateConfig& cfg, double g_t, int reuse_index);

/// Zeroes every gradient when the decision fired; otherwise returns the input unchanged.
LayerGradients apply_decision(const GateDecision& decision, LayerGradients grads);

}  // namespace grlvr
