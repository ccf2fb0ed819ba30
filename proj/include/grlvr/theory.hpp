#pragma once

#include <span>
#include <vector>

#include "grlvr/grpo.hpp"
#include "grlvr/model.hpp"
#include "grlvr/parallel.hpp"

namespace grlvr {

/// 1/2 * min_k (w^lm_k)^2 over the final RMSNorm scale.
double measure_alpha_min(const PolicyParams& params);

/// Largest singular value by power iteration on W^T W.
double spectral_norm(const Matrix& w, int max_iterations = 1000, double rel_tol = 1e-10);

struct BetaConstants {
  double beta_rms = 0.0;  // max over intermediate RMSNorm scales of (w^int_k)^2
  double rho_v = 0.0;     // max block spectral norm of wv
  double rho_up = 0.0;    // max block spectral norm of w_up
  double b_gate = 0.0;    // max |w_gate x^RMS| coordinate over the traces
  double l_sigma = 1.0;   // Lipschitz constant of SiLU / ReLU
  double rho_ffn = 0.0;   // l_sigma * b_gate * rho_up
  double beta_max = 0.0;  // max(beta_rms, rho_v^2 beta_rms, rho_ffn^2 beta_rms)
};

BetaConstants measure_beta_max(const PolicyParams& params, std::span<const ForwardTrace> traces);

struct ArchConstants {
  double alpha_min = 0.0;
  BetaConstants beta;
  double C = 0.0;
  double c_struct = 0.0;
};

/// 4 * beta_max * C / alpha_min.
double structural_constant(double beta_max, double C, double alpha_min);

/// A sampled token inside a trace.
struct TokenSite {
  std::size_t trace = 0;
  std::size_t position = 0;
  int token_id = 0;
};

/// Both clauses of the logit-sensitivity bound at one token, per intermediate layer:
/// expected_row = E_{j~pi} ||J_{j,:}||^2, sampled_row = ||J_{a,:}||^2.
struct JacobianEnergies {
  std::vector<LayerId> layers;
  std::vector<double> expected_row;
  std::vector<double> sampled_row;

  double max() const;
};

JacobianEnergies jacobian_energies(const PolicyParams& params, const ForwardTrace& trace,
                                   std::size_t position, int token_id,
                                   std::span<const LayerId> layers);

/// Tightest C for which both clauses hold on every (token, layer) pair measured.
/// Tokens are processed concurrently under `exec`; the max is reduced in token order.
double measure_jacobian_energy(const PolicyParams& params, std::span<const ForwardTrace> traces,
                               std::span<const TokenSite> sites, std::span<const LayerId> layers,
                               ExecPolicy exec = {});

/// Per-token gradient energies of the position-local GRPO gradient: ||G^lm||^2 and, for each
/// layer, ||G^int||^2 = ||dL/dy||^2 ||x^int||^2 (both rank-1 factors from backward).
struct TokenGradientEnergies {
  double lm_head = 0.0;
  std::vector<LayerId> layers;
  std::vector<double> intermediate;
};

TokenGradientEnergies token_gradient_energies(const PolicyParams& params,
                                              const ForwardTrace& trace, std::size_t position,
                                              int token_id, double ratio, double advantage,
                                              std::span<const LayerId> layers);

struct AsymmetryCheck {
  double lhs = 0.0;  // max over layers of ||G^int||^2 / ||G^lm||^2
  double rhs = 0.0;  // c_struct / (1 - pi(a))^2
  bool holds = false;
  LayerId worst_layer;
};

/// Throws InputError if advantage == 0 or pi(a) >= 1 - 1e-12.
AsymmetryCheck check_asymmetry(const TokenGradientEnergies& energies, double c_struct,
                               double prob_sampled, double advantage);

/// Eligibility for the asymmetry check: active, unclipped, |A| > 1e-12, pi(a) < 1 - 1e-12.
bool asymmetry_eligible(const TokenRecord& tok, double prob_sampled);

/// (1/T) sum (r_i^2 - 1).
double chi2_hat(std::span<const double> ratios);

/// max_i A_i^2 ||e_a - pi||^2 ||h_i||^2 over active tokens.
double c_max(const std::vector<ForwardTrace>& traces, const std::vector<TokenRecord>& tokens);

struct DivergenceReport {
  double chi2_hat = 0.0;
  double r2_mean = 0.0;
  double c_max = 0.0;
  double lm_grad_energy = 0.0;
  bool bound_satisfied = false;
};

DivergenceReport check_divergence_bound(const RolloutBatch& batch,
                                        const std::vector<ForwardTrace>& traces,
                                        const std::vector<TokenRecord>& tokens);

/// Same, reusing an already computed ||G^lm||_F^2.
DivergenceReport divergence_report(const std::vector<ForwardTrace>& traces,
                                   const std::vector<TokenRecord>& tokens,
                                   double lm_grad_energy);

struct Percentiles {
  double median = 0.0;
  double p95 = 0.0;
};

/// Linear interpolation on the sorted sample at rank q*(n-1).
Percentiles percentile_report(std::span<const double> samples);
double quantile(std::span<const double> samples, double q);

/// Per-token measurements behind the constants table.
struct ConstantsSample {
  ArchConstants constants;  // max-tight over the sample
  std::vector<double> token_C;         // per token, max over layers and clauses
  std::vector<double> token_c_struct;  // 4 beta_max C_i / alpha_min
  std::vector<double> token_beta_over_alpha;  // max_layer ||x^int||^2 / ||h_L||^2
};

ConstantsSample measure_constants(const PolicyParams& params,
                                  std::span<const ForwardTrace> traces,
                                  std::span<const TokenSite> sites, ExecPolicy exec = {});

}  // namespace grlvr
