#include "grlvr/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "grlvr/error.hpp"

namespace grlvr {

double measure_alpha_min(const PolicyParams& params) {
  const auto w = params.weights.final_norm.flat();
  double lo = std::numeric_limits<double>::infinity();
  for (double v : w) {
    if (v == 0.0) throw DegenerateConstantError("final RMSNorm scale has a zero entry");
    lo = std::min(lo, v * v);
  }
  return 0.5 * lo;
}

namespace {

Vector apply_gram(const Matrix& w, const Vector& x) {
  Vector y(w.rows());
  matvec(w, x, y);
  Vector z(w.cols(), 0.0);
  matvec_t_acc(w, y, z);
  return z;
}

}  // namespace

double spectral_norm(const Matrix& w, int max_iterations, double rel_tol) {
  if (w.rows() == 0 || w.cols() == 0) return 0.0;
  Vector x(w.cols(), 0.0);
  x[0] = 1.0;
  Vector y = apply_gram(w, x);
  if (squared_norm(y) == 0.0) {
    Rng rng(0x5eed);
    for (auto& v : x) v = rng.normal();
    y = apply_gram(w, x);
    if (squared_norm(y) == 0.0) return 0.0;
  }
  double lambda = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    const double n = std::sqrt(squared_norm(y));
    if (n == 0.0) return 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = y[i] / n;
    y = apply_gram(w, x);
    const double next = dot(x, y);  // Rayleigh quotient of W^T W
    const bool done = it > 0 && std::abs(next - lambda) <= rel_tol * std::abs(next);
    lambda = next;
    if (done) break;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

BetaConstants measure_beta_max(const PolicyParams& params, std::span<const ForwardTrace> traces) {
  if (traces.empty()) throw InputError("beta_max needs at least one trace");
  BetaConstants b;
  for (const auto& blk : params.weights.blocks) {
    for (const Matrix* norm : {&blk.attn_norm, &blk.ffn_norm})
      for (double v : norm->flat()) b.beta_rms = std::max(b.beta_rms, v * v);
    b.rho_v = std::max(b.rho_v, spectral_norm(blk.wv));
    b.rho_up = std::max(b.rho_up, spectral_norm(blk.w_up));
  }
  for (const auto& tr : traces)
    for (const auto& bt : tr.blocks)
      for (double v : bt.gate_pre.flat()) b.b_gate = std::max(b.b_gate, std::abs(v));
  b.rho_ffn = b.l_sigma * b.b_gate * b.rho_up;
  b.beta_max = std::max({b.beta_rms, b.rho_v * b.rho_v * b.beta_rms,
                         b.rho_ffn * b.rho_ffn * b.beta_rms});
  return b;
}

double structural_constant(double beta_max, double C, double alpha_min) {
  if (!(alpha_min > 0.0)) throw DegenerateConstantError("alpha_min must be positive");
  return 4.0 * beta_max * C / alpha_min;
}

double JacobianEnergies::max() const {
  double m = 0.0;
  for (double v : expected_row) m = std::max(m, v);
  for (double v : sampled_row) m = std::max(m, v);
  return m;
}

JacobianEnergies jacobian_energies(const PolicyParams& params, const ForwardTrace& trace,
                                   std::size_t position, int token_id,
                                   std::span<const LayerId> layers) {
  const auto jac = all_logit_jacobians(params, trace, position);
  const auto pi = trace.policy_at(position);
  JacobianEnergies out;
  out.layers.assign(layers.begin(), layers.end());
  for (const auto& id : layers) {
    const Matrix& j = jac.at(id.block)[static_cast<int>(id.kind)];
    double expected = 0.0;
    for (std::size_t r = 0; r < j.rows(); ++r) expected += pi[r] * squared_norm(j.row(r));
    out.expected_row.push_back(expected);
    out.sampled_row.push_back(squared_norm(j.row(static_cast<std::size_t>(token_id))));
  }
  return out;
}

namespace {

void check_sites(std::span<const ForwardTrace> traces, std::span<const TokenSite> sites) {
  for (const auto& s : sites) {
    if (s.trace >= traces.size() || s.position >= traces[s.trace].length())
      throw InputError("token site outside the traces");
  }
}

}  // namespace

double measure_jacobian_energy(const PolicyParams& params, std::span<const ForwardTrace> traces,
                               std::span<const TokenSite> sites, std::span<const LayerId> layers,
                               ExecPolicy exec) {
  if (traces.empty()) throw InputError("jacobian energy needs at least one trace");
  check_sites(traces, sites);
  std::vector<double> per(sites.size(), 0.0);
  const long n = static_cast<long>(sites.size());
  parallel_for(exec, n, [&](long i) {
    const auto& s = sites[static_cast<std::size_t>(i)];
    per[static_cast<std::size_t>(i)] =
        jacobian_energies(params, traces[s.trace], s.position, s.token_id, layers).max();
  });
  double c = 0.0;
  for (double v : per) c = std::max(c, v);
  return c;
}

TokenGradientEnergies token_gradient_energies(const PolicyParams& params,
                                              const ForwardTrace& trace, std::size_t position,
                                              int token_id, double ratio, double advantage,
                                              std::span<const LayerId> layers) {
  const Vector e = error_signal(ratio, advantage, trace.policy_at(position), token_id);
  TokenGradientEnergies out;
  out.lm_head = squared_norm(e) * squared_norm(trace.lm_head_input(position));
  const auto dy = position_output_grads(params, trace, position, e);
  out.layers.assign(layers.begin(), layers.end());
  for (const auto& id : layers) {
    const Vector& g = dy.at(id.block)[static_cast<int>(id.kind)];
    out.intermediate.push_back(squared_norm(g) *
                               squared_norm(trace.intermediate_input(id, position)));
  }
  return out;
}

AsymmetryCheck check_asymmetry(const TokenGradientEnergies& energies, double c_struct,
                               double prob_sampled, double advantage) {
  if (advantage == 0.0) throw InputError("asymmetry check needs a nonzero advantage");
  if (prob_sampled >= 1.0 - 1e-12) throw InputError("asymmetry check needs pi(a) < 1");
  if (!(energies.lm_head > 0.0)) throw InputError("lm_head gradient energy is zero");
  AsymmetryCheck out;
  out.rhs = c_struct / ((1.0 - prob_sampled) * (1.0 - prob_sampled));
  for (std::size_t l = 0; l < energies.intermediate.size(); ++l) {
    const double ratio = energies.intermediate[l] / energies.lm_head;
    if (l == 0 || ratio > out.lhs) {
      out.lhs = ratio;
      out.worst_layer = energies.layers[l];
    }
  }
  out.holds = out.lhs <= out.rhs * (1.0 + 1e-9);
  return out;
}

bool asymmetry_eligible(const TokenRecord& tok, double prob_sampled) {
  return tok.active && !tok.clipped && std::abs(tok.advantage) > 1e-12 &&
         prob_sampled < 1.0 - 1e-12;
}

double chi2_hat(std::span<const double> ratios) {
  if (ratios.empty()) throw InputError("chi2 estimate needs at least one ratio");
  double s = 0.0;
  for (double r : ratios) s += r * r - 1.0;
  return s / static_cast<double>(ratios.size());
}

double c_max(const std::vector<ForwardTrace>& traces, const std::vector<TokenRecord>& tokens) {
  double m = 0.0;
  std::size_t n = 0;
  for (const auto& t : tokens) {
    if (!t.active) continue;
    ++n;
    const auto& tr = traces.at(t.trajectory);
    const auto pi = tr.policy_at(t.position);
    double e2 = 0.0;
    for (std::size_t j = 0; j < pi.size(); ++j) {
      const double d = (static_cast<int>(j) == t.token_id ? 1.0 : 0.0) - pi[j];
      e2 += d * d;
    }
    m = std::max(m, t.advantage * t.advantage * e2 * squared_norm(tr.lm_head_input(t.position)));
  }
  if (n == 0) throw InputError("empty active set");
  return m;
}

DivergenceReport divergence_report(const std::vector<ForwardTrace>& traces,
                                   const std::vector<TokenRecord>& tokens,
                                   double lm_grad_energy) {
  std::vector<double> ratios;
  for (const auto& t : tokens)
    if (t.active) ratios.push_back(t.ratio);
  DivergenceReport rep;
  rep.chi2_hat = chi2_hat(ratios);
  double r2 = 0.0;
  for (double r : ratios) r2 += r * r;
  rep.r2_mean = r2 / static_cast<double>(ratios.size());
  rep.c_max = c_max(traces, tokens);
  rep.lm_grad_energy = lm_grad_energy;
  rep.bound_satisfied = lm_grad_energy <= rep.c_max * (1.0 + rep.chi2_hat) * (1.0 + 1e-9);
  return rep;
}

DivergenceReport check_divergence_bound(const RolloutBatch& batch,
                                        const std::vector<ForwardTrace>& traces,
                                        const std::vector<TokenRecord>& tokens) {
  return divergence_report(traces, tokens,
                           frobenius_sq(lm_head_batch_gradient(batch, traces, tokens)));
}

double quantile(std::span<const double> samples, double q) {
  if (samples.empty()) throw InputError("quantile of an empty sample");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  const double rank = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return s[lo] + frac * (s[hi] - s[lo]);
}

Percentiles percentile_report(std::span<const double> samples) {
  return {quantile(samples, 0.5), quantile(samples, 0.95)};
}

ConstantsSample measure_constants(const PolicyParams& params,
                                  std::span<const ForwardTrace> traces,
                                  std::span<const TokenSite> sites, ExecPolicy exec) {
  if (sites.empty()) throw InputError("constants need at least one token");
  check_sites(traces, sites);
  ConstantsSample out;
  auto& c = out.constants;
  c.alpha_min = measure_alpha_min(params);
  c.beta = measure_beta_max(params, traces);
  const auto layers = intermediate_layers(params.config);

  const std::size_t n = sites.size();
  out.token_C.assign(n, 0.0);
  out.token_beta_over_alpha.assign(n, 0.0);
  parallel_for(exec, static_cast<long>(n), [&](long i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto& s = sites[idx];
    const auto& tr = traces[s.trace];
    out.token_C[idx] = jacobian_energies(params, tr, s.position, s.token_id, layers).max();
    double xmax = 0.0;
    for (const auto& id : layers)
      xmax = std::max(xmax, squared_norm(tr.intermediate_input(id, s.position)));
    out.token_beta_over_alpha[idx] = xmax / squared_norm(tr.lm_head_input(s.position));
  });
  for (double v : out.token_C) c.C = std::max(c.C, v);
  c.c_struct = structural_constant(c.beta.beta_max, c.C, c.alpha_min);
  for (double v : out.token_C)
    out.token_c_struct.push_back(structural_constant(c.beta.beta_max, v, c.alpha_min));
  return out;
}

}  // namespace grlvr
