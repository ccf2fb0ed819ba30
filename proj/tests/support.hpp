#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "grlvr/grpo.hpp"
#include "grlvr/model.hpp"
#include "grlvr/rng.hpp"
#include "grlvr/tensor.hpp"

namespace grlvr::test {

/// Small model used by the gradient and Jacobian suites.
inline ModelConfig tiny_config(int d_model = 16, int n_layers = 2) {
  ModelConfig c;
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = 2;
  c.d_ff = 2 * d_model;
  c.vocab_size = 24;
  c.max_seq_len = 8;
  return c;
}

/// Random weights with non-trivial RMSNorm scales, large enough that every path carries signal.
inline PolicyParams random_params(const ModelConfig& cfg, std::uint64_t seed, double std = 0.4) {
  PolicyParams p = init_params(cfg, seed, std);
  Rng rng(seed ^ 0xabcdefULL);
  for (auto& t : p.weights.tensors())
    if (t.name.ends_with("norm"))
      for (double& x : t.tensor->flat()) x = 0.5 + rng.uniform();
  return p;
}

inline std::vector<int> random_tokens(const ModelConfig& cfg, std::size_t n, Rng& rng) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));
  return t;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double std = 1.0) {
  Matrix m(r, c);
  for (double& x : m.flat()) x = std * rng.normal();
  return m;
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.flat()[i] - b.flat()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double relative_frobenius(const Matrix& got, const Matrix& want) {
  const double n = std::sqrt(frobenius_sq(want));
  return frobenius_distance(got, want) / (n > 0.0 ? n : 1.0);
}

inline Matrix outer(std::span<const double> a, std::span<const double> b) {
  Matrix m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
  return m;
}

/// Additive perturbation of one intermediate layer output at one position.
struct OutputNudge {
  LayerId layer;
  std::size_t position = 0;
  std::size_t coord = 0;
  double delta = 0.0;
};

/// Straight-line re-implementation of the policy forward pass with its own loops and no
/// shared helpers, evaluated in long double so that central differences at step 1e-5 are
/// not swamped by rounding. Returns T x vocab logits. The optional nudge is added to
/// y = W x of one layer at one position, which turns it into a finite-difference oracle for
/// Jacobians.
using OracleRows = std::vector<std::vector<long double>>;

inline OracleRows oracle_logits_ld(const PolicyParams& p, const std::vector<int>& tokens,
                                   std::optional<OutputNudge> nudge = {}) {
  using R = long double;
  using Rows = OracleRows;
  const auto& c = p.config;
  const auto& w = p.weights;
  const std::size_t T = tokens.size();
  const std::size_t d = c.d_model, ff = c.d_ff, V = c.vocab_size, H = c.n_heads, dh = d / H;

  auto norm = [&](const std::vector<R>& v, const Matrix& s) {
    R ms = 0;
    for (R x : v) ms += x * x;
    const R inv = 1.0L / std::sqrt(ms / static_cast<R>(v.size()) + static_cast<R>(c.rms_eps));
    std::vector<R> o(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) o[k] = v[k] * inv * s(0, k);
    return o;
  };
  auto apply = [&](const Matrix& m, const std::vector<R>& x, LayerId id, std::size_t t) {
    std::vector<R> y(m.rows(), 0.0L);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t k = 0; k < m.cols(); ++k) y[r] += m(r, k) * x[k];
    if (nudge && nudge->layer == id && nudge->position == t) y[nudge->coord] += nudge->delta;
    return y;
  };
  auto act = [&](R x) {
    return c.activation == Activation::relu ? (x > 0 ? x : 0.0L) : x / (1.0L + std::exp(-x));
  };

  Rows x(T, std::vector<R>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < d; ++k)
      x[t][k] = w.token_embedding(tokens[t], k) + w.position_embedding(t, k);

  for (int b = 0; b < c.n_layers; ++b) {
    const auto& B = w.blocks[b];
    Rows q(T), kk(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      auto n = norm(x[t], B.attn_norm);
      q[t] = apply(B.wq, n, {b, LayerKind::q}, t);
      kk[t] = apply(B.wk, n, {b, LayerKind::k}, t);
      v[t] = apply(B.wv, n, {b, LayerKind::v}, t);
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<R> att(d, 0.0L);
      for (std::size_t h = 0; h < H; ++h) {
        std::vector<R> s(t + 1);
        R mx = -1e300L;
        for (std::size_t j = 0; j <= t; ++j) {
          R acc = 0;
          for (std::size_t e = 0; e < dh; ++e) acc += q[t][h * dh + e] * kk[j][h * dh + e];
          s[j] = acc / std::sqrt(static_cast<R>(dh));
          mx = std::max(mx, s[j]);
        }
        R z = 0;
        for (R& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t e = 0; e < dh; ++e) att[h * dh + e] += s[j] / z * v[j][h * dh + e];
      }
      auto o = apply(B.wo, att, {b, LayerKind::o}, t);
      for (std::size_t k = 0; k < d; ++k) x[t][k] += o[k];
    }
    for (std::size_t t = 0; t < T; ++t) {
      auto n = norm(x[t], B.ffn_norm);
      auto g = apply(B.w_gate, n, {b, LayerKind::gate}, t);
      auto u = apply(B.w_up, n, {b, LayerKind::up}, t);
      std::vector<R> hid(ff);
      for (std::size_t k = 0; k < ff; ++k) hid[k] = act(g[k]) * u[k];
      auto dn = apply(B.w_down, hid, {b, LayerKind::down}, t);
      for (std::size_t k = 0; k < d; ++k) x[t][k] += dn[k];
    }
  }

  Rows logits(T, std::vector<R>(V, 0.0L));
  for (std::size_t t = 0; t < T; ++t) {
    auto h = norm(x[t], w.final_norm);
    for (std::size_t r = 0; r < V; ++r)
      for (std::size_t k = 0; k < d; ++k) logits[t][r] += w.lm_head(r, k) * h[k];
  }
  return logits;
}

inline std::vector<std::vector<double>> oracle_logits(const PolicyParams& p,
                                                      const std::vector<int>& tokens,
                                                      std::optional<OutputNudge> nudge = {}) {
  const auto z = oracle_logits_ld(p, tokens, nudge);
  std::vector<std::vector<double>> out;
  for (const auto& row : z) out.emplace_back(row.begin(), row.end());
  return out;
}

/// sum_t <G_t, z_t>, the scalar whose gradient backward() computes.
inline long double probe_objective(const PolicyParams& p, const std::vector<int>& tokens,
                              const Matrix& logit_grads) {
  const auto z = oracle_logits_ld(p, tokens);
  long double s = 0.0L;
  for (std::size_t t = 0; t < z.size(); ++t)
    for (std::size_t v = 0; v < z[t].size(); ++v) s += logit_grads(t, v) * z[t][v];
  return s;
}

struct FdStats {
  std::size_t compared = 0;
  std::size_t failed = 0;
  double worst = 0.0;
  std::string first_failure;
};

/// Central differences (step 1e-5) of the oracle objective against backward() on one random
/// (params, tokens, logit_grads) triple at d_model=16, n_layers=2. Entries with |g| <= 1e-8
/// are skipped; the rest must agree within 1e-4 relative.
inline FdStats fd_gradient_check(std::uint64_t seed, Activation act) {
  auto cfg = tiny_config(16, 2);
  cfg.activation = act;
  auto p = random_params(cfg, seed);
  Rng rng(seed + 100);
  auto toks = random_tokens(cfg, 2 + rng.below(4), rng);
  Matrix dz = random_matrix(toks.size(), cfg.vocab_size, rng);
  auto g = backward(p, forward(p, toks), dz);

  FdStats st;
  const double h = 1e-5;
  auto params = p.weights.tensors();
  auto grads = g.weights.tensors();
  for (std::size_t ti = 0; ti < params.size(); ++ti) {
    auto flat = params[ti].tensor->flat();
    for (std::size_t j = 0; j < flat.size(); ++j) {
      const double an = grads[ti].tensor->flat()[j];
      if (std::abs(an) <= 1e-8) continue;
      const double keep = flat[j];
      flat[j] = keep + h;
      const long double fp = probe_objective(p, toks, dz);
      flat[j] = keep - h;
      const long double fm = probe_objective(p, toks, dz);
      flat[j] = keep;
      const double fd = static_cast<double>((fp - fm) / (2 * h));
      const double rel = std::abs(fd - an) / std::abs(an);
      ++st.compared;
      st.worst = std::max(st.worst, rel);
      if (rel > 1e-4 && st.failed++ == 0) {
        std::ostringstream os;
        os << params[ti].name << "[" << j << "] analytic " << an << " fd " << fd;
        st.first_failure = os.str();
      }
    }
  }
  return st;
}

}  // namespace grlvr::test

namespace grlvr::test {

/// A hand-built trajectory; logprob_old defaults to zeros.
inline Trajectory make_trajectory(std::vector<int> prompt, std::vector<int> response, int reward,
                                  std::vector<double> logprob_old = {}) {
  Trajectory t;
  t.instance.prompt = std::move(prompt);
  t.instance.target = {0};
  t.response = std::move(response);
  t.logprob_old = logprob_old.empty() ? std::vector<double>(t.response.size(), 0.0) : logprob_old;
  t.reward = reward;
  return t;
}

/// Sets every logprob_old so that the live policy's ratio for that token equals `ratio`.
inline void set_ratios(RolloutBatch& batch, const std::vector<ForwardTrace>& traces, double ratio) {
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    auto& tr = batch.trajectories[i];
    for (std::size_t j = 0; j < tr.response.size(); ++j) {
      const auto lp = log_softmax(traces[i].logits_at(tr.position_of(j)));
      tr.logprob_old[j] = lp[static_cast<std::size_t>(tr.response[j])] - std::log(ratio);
    }
  }
}

struct RankOneStats {
  std::size_t tokens = 0;
  std::size_t layer_checks = 0;
  double worst_lm = 0.0;
  double worst_int = 0.0;
};

/// Per-token closed forms against backward(). For each sampled token the logit gradient at its
/// position is E = r A (e_a - pi); backward() with that single row must give lm_head gradient
/// E h^T, and its output-gradient tap for every intermediate layer at that position must be
/// J^T E, so the position's contribution to the layer gradient is (J^T E) x^T. On one-position
/// traces the position's contribution is the whole gradient, which is compared directly.
inline RankOneStats rank_one_check(std::uint64_t seed, std::size_t n_tokens) {
  RankOneStats st;
  Rng rng(seed);
  auto cfg = tiny_config(16, 2);
  auto p = random_params(cfg, seed, 0.3);
  while (st.tokens < n_tokens) {
    const std::size_t len = 1 + rng.below(5);
    auto toks = random_tokens(cfg, len, rng);
    auto tr = forward(p, toks);
    const std::size_t pos = rng.below(len);
    const int a = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));
    const double ratio = 0.5 + rng.uniform();
    const double adv = rng.normal();
    const auto E = error_signal(ratio, adv, tr.policy_at(pos), a);
    Matrix dz(len, cfg.vocab_size);
    std::copy(E.begin(), E.end(), dz.row(pos).begin());
    OutputGradTaps taps;
    auto g = backward(p, tr, dz, &taps);

    st.worst_lm = std::max(st.worst_lm, relative_frobenius(g.lm_head(), outer(E, tr.lm_head_input(pos))));
    auto J = all_logit_jacobians(p, tr, pos);
    for (auto id : intermediate_layers(cfg)) {
      const Matrix& Jl = J[id.block][static_cast<int>(id.kind)];
      Vector jte(Jl.cols(), 0.0);
      matvec_t_acc(Jl, E, jte);
      const Matrix closed = outer(jte, tr.intermediate_input(id, pos));
      const Matrix local = outer(taps.at(id).row(pos), tr.intermediate_input(id, pos));
      double err = relative_frobenius(local, closed);
      if (len == 1) err = std::max(err, relative_frobenius(g.linear(id), closed));
      st.worst_int = std::max(st.worst_int, err);
      ++st.layer_checks;
    }
    ++st.tokens;
  }
  return st;
}

}  // namespace grlvr::test
