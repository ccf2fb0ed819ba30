#include "grlvr/verify.hpp"

#include <algorithm>
#include <cmath>

#include "grlvr/error.hpp"
#include "grlvr/theory.hpp"
#include "grlvr/trainer.hpp"

namespace grlvr {

void CheckResult::add(double margin) {
  ++n_checked;
  if (!(margin >= 0.0)) ++n_violations;
  worst_margin = std::min(worst_margin, margin);
  if (std::isnan(margin)) worst_margin = margin;
}

VerificationReport VerificationReport::empty() {
  VerificationReport r;
  for (const char* name : {"prop1_lm_head", "prop1_intermediate", "lemma1_lower", "lemma1_upper",
                           "theorem1", "lemma2", "theorem2", "chi2_identity"})
    r.checks.push_back({name});
  return r;
}

CheckResult& VerificationReport::at(const std::string& name) {
  for (auto& c : checks)
    if (c.name == name) return c;
  throw InputError("unknown check " + name);
}

const CheckResult& VerificationReport::at(const std::string& name) const {
  return const_cast<VerificationReport*>(this)->at(name);
}

std::size_t VerificationReport::total_violations() const {
  std::size_t n = 0;
  for (const auto& c : checks) n += c.n_violations;
  return n;
}

std::string VerificationReport::to_json() const {
  std::string arr = "[";
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const auto& c = checks[i];
    JsonObject o;
    o.field("name", c.name)
        .field("n_checked", c.n_checked)
        .field("n_violations", c.n_violations)
        .field("worst_margin", c.n_checked ? std::optional<double>(c.worst_margin) : std::nullopt);
    if (i) arr += ',';
    arr += o.str();
  }
  arr += "]";
  JsonObject top;
  top.field("ok", ok()).field("violations", total_violations()).raw("checks", arr);
  return top.str();
}

namespace {

double rel_margin(double tol, double err, double scale) {
  if (scale == 0.0) return err == 0.0 ? tol : -err;
  return tol - err / scale;
}

std::vector<std::size_t> strided(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> out;
  if (n == 0) return out;
  if (limit == 0 || limit >= n) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  const std::size_t stride = n / limit;
  for (std::size_t i = 0; i < n && out.size() < limit; i += stride) out.push_back(i);
  return out;
}

void check_prop1(const PolicyParams& params, const std::vector<ForwardTrace>& traces,
                 const std::vector<TokenRecord>& active, const VerifyOptions& opts,
                 VerificationReport& report) {
  const auto layers = intermediate_layers(params.config);
  const auto pick = strided(active.size(), opts.prop1_tokens);
  const std::size_t n = pick.size();
  std::vector<double> lm_margin(n);
  std::vector<std::vector<double>> int_margin(n);
  parallel_for(opts.exec, static_cast<long>(n), [&](long ii) {
    const auto i = static_cast<std::size_t>(ii);
    const auto& tok = active[pick[i]];
    const auto& tr = traces[tok.trajectory];
    const Vector e = error_signal(tok.ratio, tok.advantage, tr.policy_at(tok.position), tok.token_id);
    Matrix dz(tr.length(), static_cast<std::size_t>(params.config.vocab_size));
    std::copy(e.begin(), e.end(), dz.row(tok.position).begin());
    OutputGradTaps taps;
    const auto g = backward(params, tr, dz, &taps);

    const auto h = tr.lm_head_input(tok.position);
    double diff = 0.0;
    for (std::size_t r = 0; r < e.size(); ++r)
      for (std::size_t c = 0; c < h.size(); ++c) {
        const double d = g.lm_head()(r, c) - e[r] * h[c];
        diff += d * d;
      }
    lm_margin[i] = rel_margin(1e-8, std::sqrt(diff),
                              std::sqrt(squared_norm(e) * squared_norm(h)));

    const auto jac = all_logit_jacobians(params, tr, tok.position);
    for (const auto& id : layers) {
      const Matrix& j = jac[id.block][static_cast<int>(id.kind)];
      Vector jte(j.cols(), 0.0);
      matvec_t_acc(j, e, jte);
      const auto tap = taps.at(id).row(tok.position);
      double d2 = 0.0;
      for (std::size_t c = 0; c < jte.size(); ++c) d2 += (jte[c] - tap[c]) * (jte[c] - tap[c]);
      // ||(a - b) x^T||_F / ||b x^T||_F = ||a - b|| / ||b||
      int_margin[i].push_back(rel_margin(1e-8, std::sqrt(d2), std::sqrt(squared_norm(tap))));
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    report.at("prop1_lm_head").add(lm_margin[i]);
    for (double m : int_margin[i]) report.at("prop1_intermediate").add(m);
  }
}

void check_lemma1(const PolicyParams& params, const std::vector<ForwardTrace>& traces,
                  VerificationReport& report) {
  const double d = params.config.d_model;
  const double eps = params.config.rms_eps;
  const double alpha = measure_alpha_min(params);
  const auto beta = measure_beta_max(params, traces);
  const auto layers = intermediate_layers(params.config);
  auto& lower = report.at("lemma1_lower");
  auto& upper = report.at("lemma1_upper");
  for (const auto& tr : traces) {
    for (std::size_t pos = 0; pos < tr.length(); ++pos) {
      const double mean_sq = squared_norm(tr.final_in.row(pos)) / d;
      if (mean_sq >= eps) {
        const double bound = alpha * d;
        lower.add((squared_norm(tr.lm_head_input(pos)) - bound) / bound);
      }
      for (const auto& id : layers) {
        const double bound = beta.beta_max * d;
        upper.add((bound - squared_norm(tr.intermediate_input(id, pos))) / bound);
      }
    }
  }
}

void check_theorem1(const PolicyParams& params, const std::vector<ForwardTrace>& traces,
                    const std::vector<TokenRecord>& active, const VerifyOptions& opts,
                    VerificationReport& report) {
  std::vector<TokenRecord> eligible;
  for (const auto& t : active) {
    const double p = traces[t.trajectory].policy_at(t.position)[static_cast<std::size_t>(t.token_id)];
    if (asymmetry_eligible(t, p)) eligible.push_back(t);
  }
  if (eligible.empty()) return;
  const auto pick = strided(eligible.size(), opts.theorem1_tokens);
  const auto layers = intermediate_layers(params.config);
  const std::size_t n = pick.size();
  std::vector<double> token_c(n);
  std::vector<TokenGradientEnergies> energies(n);
  parallel_for(opts.exec, static_cast<long>(n), [&](long ii) {
    const auto i = static_cast<std::size_t>(ii);
    const auto& t = eligible[pick[i]];
    const auto& tr = traces[t.trajectory];
    token_c[i] = jacobian_energies(params, tr, t.position, t.token_id, layers).max();
    energies[i] = token_gradient_energies(params, tr, t.position, t.token_id, t.ratio,
                                          t.advantage, layers);
    for (double& v : energies[i].intermediate) v *= opts.fault_scale;
  });
  double c = 0.0;
  for (double v : token_c) c = std::max(c, v);
  const double c_struct = structural_constant(measure_beta_max(params, traces).beta_max, c,
                                              measure_alpha_min(params));
  auto& out = report.at("theorem1");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = eligible[pick[i]];
    const double p = traces[t.trajectory].policy_at(t.position)[static_cast<std::size_t>(t.token_id)];
    const auto chk = check_asymmetry(energies[i], c_struct, p, t.advantage);
    out.add(chk.rhs > 0.0 ? (chk.rhs * (1.0 + 1e-9) - chk.lhs) / chk.rhs
                          : (chk.lhs == 0.0 ? 0.0 : -chk.lhs));
  }
}

}  // namespace

void verify_batch(const PolicyParams& params, const RolloutBatch& batch,
                  const std::vector<ForwardTrace>& traces, const std::vector<TokenRecord>& tokens,
                  const VerifyOptions& opts, VerificationReport& report) {
  std::vector<TokenRecord> active;
  for (const auto& t : tokens)
    if (t.active) active.push_back(t);
  if (active.empty()) throw InputError("empty active set");

  check_prop1(params, traces, active, opts, report);
  check_lemma1(params, traces, report);
  check_theorem1(params, traces, active, opts, report);

  const double g2 = frobenius_sq(lm_head_batch_gradient(batch, traces, tokens));
  const auto div = divergence_report(traces, tokens, g2);
  const auto slack = [](double bound, double value) {
    return bound > 0.0 ? (bound * (1.0 + 1e-9) - value) / bound : (value == 0.0 ? 0.0 : -value);
  };
  report.at("lemma2").add(slack(div.c_max * div.r2_mean, g2));
  report.at("theorem2").add(slack(div.c_max * (1.0 + div.chi2_hat), g2));
  report.at("chi2_identity").add(1e-12 - std::abs(div.r2_mean - (1.0 + div.chi2_hat)));
}

VerificationReport run_verification(const PolicyParams& params, const RunConfig& cfg,
                                    ExecPolicy exec) {
  RunConfig c = cfg;
  c.trainer.prompt_batch = cfg.verify.prompts;
  const RolloutBatch batch = collect_rollouts(params, c, 0, exec);
  VerifyOptions opts;
  opts.exec = exec;
  opts.prop1_tokens = static_cast<std::size_t>(cfg.verify.prop1_tokens);
  opts.theorem1_tokens = static_cast<std::size_t>(cfg.verify.theorem1_tokens);
  opts.fault_scale = cfg.verify.fault_scale;

  VerificationReport report = VerificationReport::empty();
  PolicyParams live = params;
  AdamState adam = AdamState::zeros(params.config);
  const AdamHyper hyper{cfg.trainer.lr, cfg.trainer.beta1, cfg.trainer.beta2, cfg.trainer.adam_eps};
  for (int s = 0; s <= cfg.verify.reuse_steps; ++s) {
    const auto traces = forward_batch(live, batch, exec);
    const auto loss = grpo_loss(batch, traces, cfg.trainer.eps_clip);
    verify_batch(live, batch, traces, loss.tokens, opts, report);
    if (s == cfg.verify.reuse_steps) break;
    auto grads = grpo_gradients(live, batch, traces, loss.tokens, exec);
    scale(grads.weights, -1.0);
    adam_step(live, grads.weights, adam, hyper);
  }
  return report;
}

std::string measure_report(const PolicyParams& params, const RunConfig& cfg, ExecPolicy exec) {
  RunConfig c = cfg;
  c.trainer.prompt_batch = cfg.measure.prompts;
  const RolloutBatch batch = collect_rollouts(params, c, 0, exec);
  const auto traces = forward_batch(params, batch, exec);
  std::vector<TokenSite> all;
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    const auto& tr = batch.trajectories[i];
    for (std::size_t j = 0; j < tr.response.size(); ++j)
      all.push_back({i, tr.position_of(j), tr.response[j]});
  }
  std::vector<TokenSite> sites;
  for (std::size_t i : strided(all.size(), static_cast<std::size_t>(cfg.measure.max_tokens)))
    sites.push_back(all[i]);
  const auto s = measure_constants(params, traces, sites, exec);
  const auto& k = s.constants;
  const auto pct = [](const std::vector<double>& v) {
    const auto p = percentile_report(v);
    JsonObject o;
    o.field("median", p.median).field("p95", p.p95);
    return o;
  };
  JsonObject o;
  o.field("tokens", sites.size())
      .field("alpha_min", k.alpha_min)
      .field("beta_rms", k.beta.beta_rms)
      .field("rho_v", k.beta.rho_v)
      .field("rho_up", k.beta.rho_up)
      .field("b_gate", k.beta.b_gate)
      .field("l_sigma", k.beta.l_sigma)
      .field("rho_ffn", k.beta.rho_ffn)
      .field("beta_max", k.beta.beta_max)
      .field("beta_max_over_alpha_min", k.beta.beta_max / k.alpha_min)
      .field("C", k.C)
      .field("c_struct", k.c_struct)
      .field("token_C", pct(s.token_C))
      .field("token_c_struct", pct(s.token_c_struct))
      .field("token_beta_over_alpha", pct(s.token_beta_over_alpha));
  return o.str();
}

}  // namespace grlvr
