#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "grlvr/env.hpp"
#include "grlvr/gating.hpp"
#include "grlvr/model.hpp"

namespace grlvr {

enum class Regime : std::uint8_t { single_use, naive_reuse, dgg };

std::string_view to_string(Regime r);
Regime regime_from_string(std::string_view s);

/// Supervised warm start on (prompt, target + EOS) pairs before RL begins.
struct PretrainConfig {
  int steps = 0;
  int batch_size = 32;
  double lr = 3e-3;
};

struct TrainerConfig {
  int max_reuse = 4;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double eps_clip = 0.2;
  double kl_coef = 0.0;
  int prompt_batch = 8;
  double temperature = 0.7;
  int total_iterations = 200;
  int profile_interval = 10;
  int checkpoint_interval = 10;
  int keep_checkpoints = 0;  // 0 keeps every checkpoint
  int workers = 1;
  int eval_prompts = 256;
  int constants_interval = 0;  // 0 disables constants snapshots
  int constants_tokens = 32;
};

struct MeasureConfig {
  std::string checkpoint;  // empty: measure the freshly initialized model
  int prompts = 32;
  int max_tokens = 256;
};

struct VerifyConfig {
  std::string checkpoint;  // empty: verify the freshly initialized model
  int prompts = 4;
  int reuse_steps = 3;        // extra off-policy updates, each re-verified
  int prop1_tokens = 24;      // tokens checked against dense Jacobians
  int theorem1_tokens = 256;  // 0 checks every eligible token
  double fault_scale = 1.0;   // multiplies every intermediate gradient energy (test fixture)
};

struct RunConfig {
  std::uint64_t seed = 0;
  Regime regime = Regime::dgg;
  ModelConfig model;
  double init_std = 0.02;
  TaskConfig task;
  PretrainConfig pretrain;
  TrainerConfig trainer;
  GateConfig gate;
  MeasureConfig measure;
  VerifyConfig verify;

  /// Throws ConfigError.
  void validate() const;
  int effective_reuse() const { return regime == Regime::single_use ? 1 : trainer.max_reuse; }
};

nlohmann::ordered_json to_json(const RunConfig& cfg);

/// Overlays `doc` onto the defaults. Unknown keys and type mismatches are ConfigErrors.
RunConfig config_from_json(const nlohmann::json& doc);

RunConfig load_config(const std::filesystem::path& path);

/// Applies "dotted.path=value" overrides to a config document, type-checked against the
/// defaults tree.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

/// Resolves file (optional) + overrides into a validated config.
RunConfig resolve_config(const std::filesystem::path& path,
                         const std::vector<std::string>& overrides);

}  // namespace grlvr
