#pragma once

#include <limits>
#include <string>
#include <vector>

#include "grlvr/config.hpp"
#include "grlvr/grpo.hpp"
#include "grlvr/metrics.hpp"
#include "grlvr/model.hpp"
#include "grlvr/parallel.hpp"

namespace grlvr {

/// Tally of one inequality or identity. margin >= 0 means the check held; the worst
/// (smallest) margin is kept.
struct CheckResult {
  std::string name;
  std::size_t n_checked = 0;
  std::size_t n_violations = 0;
  double worst_margin = std::numeric_limits<double>::infinity();

  void add(double margin);
};

struct VerificationReport {
  std::vector<CheckResult> checks;

  /// Creates the fixed check list: prop1_lm_head, prop1_intermediate, lemma1_lower,
  /// lemma1_upper, theorem1, lemma2, theorem2, chi2_identity.
  static VerificationReport empty();

  CheckResult& at(const std::string& name);
  const CheckResult& at(const std::string& name) const;
  std::size_t total_violations() const;
  bool ok() const { return total_violations() == 0; }
  std::string to_json() const;
};

struct VerifyOptions {
  ExecPolicy exec;
  std::size_t prop1_tokens = 24;    // dense-Jacobian comparisons per batch
  std::size_t theorem1_tokens = 0;  // 0 checks every eligible token
  double fault_scale = 1.0;         // multiplies intermediate gradient energies
};

/// Runs every check on one scored batch under the live policy `params`.
/// Throws InputError when the batch has no active tokens.
void verify_batch(const PolicyParams& params, const RolloutBatch& batch,
                  const std::vector<ForwardTrace>& traces, const std::vector<TokenRecord>& tokens,
                  const VerifyOptions& opts, VerificationReport& report);

/// Rollouts from `params`, verified on-policy and again after each of
/// cfg.verify.reuse_steps off-policy updates on the same batch.
VerificationReport run_verification(const PolicyParams& params, const RunConfig& cfg,
                                    ExecPolicy exec = {});

/// The constants table for a policy over rollouts drawn from it.
std::string measure_report(const PolicyParams& params, const RunConfig& cfg, ExecPolicy exec = {});

}  // namespace grlvr
