#include "grlvr/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "grlvr/error.hpp"

namespace grlvr {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::string_view to_string(Activation a) { return a == Activation::silu ? "silu" : "relu"; }

Activation activation_from_string(std::string_view s) {
  if (s == "silu") return Activation::silu;
  if (s == "relu") return Activation::relu;
  throw InputError(fmt::format("unknown activation '{}'", s));
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
    throw InputError("model dimensions must be positive");
  if (d_model % n_heads != 0) throw InputError("d_model must be divisible by n_heads");
  if (vocab_size < 2) throw InputError("vocab_size must be >= 2");
  if (!(rms_eps > 0.0) || !std::isfinite(rms_eps)) throw InputError("rms_eps must be > 0");
}

std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::q: return "wq";
    case LayerKind::k: return "wk";
    case LayerKind::v: return "wv";
    case LayerKind::o: return "wo";
    case LayerKind::gate: return "w_gate";
    case LayerKind::up: return "w_up";
    case LayerKind::down: return "w_down";
  }
  return "?";
}

std::string LayerId::name() const { return fmt::format("blocks.{}.{}", block, to_string(kind)); }

std::vector<LayerId> intermediate_layers(const ModelConfig& cfg) {
  std::vector<LayerId> out;
  for (int b = 0; b < cfg.n_layers; ++b)
    for (auto k : kLayerKinds) out.push_back({b, k});
  return out;
}

Matrix& BlockWeights::linear(LayerKind kind) {
  return const_cast<Matrix&>(std::as_const(*this).linear(kind));
}

const Matrix& BlockWeights::linear(LayerKind kind) const {
  switch (kind) {
    case LayerKind::q: return wq;
    case LayerKind::k: return wk;
    case LayerKind::v: return wv;
    case LayerKind::o: return wo;
    case LayerKind::gate: return w_gate;
    case LayerKind::up: return w_up;
    case LayerKind::down: return w_down;
  }
  throw InputError("bad layer kind");
}

Weights Weights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  Weights w;
  w.token_embedding = Matrix(vocab, d);
  w.position_embedding = Matrix(static_cast<std::size_t>(cfg.max_seq_len), d);
  w.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& b : w.blocks) {
    b.attn_norm = Matrix(1, d);
    b.wq = Matrix(d, d);
    b.wk = Matrix(d, d);
    b.wv = Matrix(d, d);
    b.wo = Matrix(d, d);
    b.ffn_norm = Matrix(1, d);
    b.w_gate = Matrix(ff, d);
    b.w_up = Matrix(ff, d);
    b.w_down = Matrix(d, ff);
  }
  w.final_norm = Matrix(1, d);
  w.lm_head = Matrix(vocab, d);
  return w;
}

namespace {

template <typename W, typename M>
std::vector<NamedTensor<M>> collect(W& w) {
  std::vector<NamedTensor<M>> out;
  out.push_back({"token_embedding", &w.token_embedding});
  out.push_back({"position_embedding", &w.position_embedding});
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    auto& blk = w.blocks[b];
    const auto p = fmt::format("blocks.{}.", b);
    out.push_back({p + "attn_norm", &blk.attn_norm});
    out.push_back({p + "wq", &blk.wq});
    out.push_back({p + "wk", &blk.wk});
    out.push_back({p + "wv", &blk.wv});
    out.push_back({p + "wo", &blk.wo});
    out.push_back({p + "ffn_norm", &blk.ffn_norm});
    out.push_back({p + "w_gate", &blk.w_gate});
    out.push_back({p + "w_up", &blk.w_up});
    out.push_back({p + "w_down", &blk.w_down});
  }
  out.push_back({"final_norm", &w.final_norm});
  out.push_back({"lm_head", &w.lm_head});
  return out;
}

}  // namespace

std::vector<NamedTensor<Matrix>> Weights::tensors() { return collect<Weights, Matrix>(*this); }

std::vector<NamedTensor<const Matrix>> Weights::tensors() const {
  return collect<const Weights, const Matrix>(*this);
}

std::size_t Weights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.tensor->size();
  return n;
}

bool Weights::all_finite() const {
  for (const auto& t : tensors())
    if (!grlvr::all_finite(t.tensor->flat())) return false;
  return true;
}

bool Weights::same_shape(const Weights& o) const {
  auto a = tensors();
  auto b = o.tensors();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].tensor->same_shape(*b[i].tensor)) return false;
  return true;
}

void axpy(Weights& self, double scale, const Weights& other) {
  auto dst = self.tensors();
  auto src = other.tensors();
  if (dst.size() != src.size()) throw InputError("axpy: weight sets differ in structure");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].tensor->flat();
    auto s = src[i].tensor->flat();
    if (d.size() != s.size()) throw InputError("axpy: shape mismatch at " + dst[i].name);
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += scale * s[j];
  }
}

void scale(Weights& self, double s) {
  for (auto& t : self.tensors())
    for (double& x : t.tensor->flat()) x *= s;
}

PolicyParams init_params(const ModelConfig& cfg, std::uint64_t seed, double init_std) {
  PolicyParams p{cfg, Weights::zeros(cfg)};
  Rng rng(derive_seed({seed, 0x1417}));
  for (auto& t : p.weights.tensors()) {
    const bool is_norm = t.name.ends_with("norm");
    for (double& x : t.tensor->flat()) x = is_norm ? 1.0 : init_std * rng.normal();
  }
  return p;
}

double LayerGradients::global_energy() const {
  double s = 0.0;
  for (const auto& t : weights.tensors()) s += frobenius_sq(*t.tensor);
  return s;
}

std::span<const double> ForwardTrace::intermediate_input(LayerId id, std::size_t pos) const {
  const auto& b = blocks.at(static_cast<std::size_t>(id.block));
  switch (id.kind) {
    case LayerKind::q:
    case LayerKind::k:
    case LayerKind::v: return b.attn_normed.row(pos);
    case LayerKind::o: return b.attn_out.row(pos);
    case LayerKind::gate:
    case LayerKind::up: return b.ffn_normed.row(pos);
    case LayerKind::down: return b.hidden.row(pos);
  }
  throw InputError("bad layer kind");
}

std::span<const double> ForwardTrace::intermediate_output(LayerId id, std::size_t pos) const {
  const auto& b = blocks.at(static_cast<std::size_t>(id.block));
  switch (id.kind) {
    case LayerKind::q: return b.q.row(pos);
    case LayerKind::k: return b.k.row(pos);
    case LayerKind::v: return b.v.row(pos);
    case LayerKind::o: return b.attn_proj.row(pos);
    case LayerKind::gate: return b.gate_pre.row(pos);
    case LayerKind::up: return b.up.row(pos);
    case LayerKind::down: return b.ffn_proj.row(pos);
  }
  throw InputError("bad layer kind");
}

Vector rmsnorm(std::span<const double> v, std::span<const double> w, double eps) {
  if (v.size() != w.size()) throw InputError("rmsnorm: length mismatch");
  if (!(eps > 0.0)) throw InputError("rmsnorm: eps must be > 0");
  const double ms = squared_norm(v) / static_cast<double>(v.size());
  const double inv = 1.0 / std::sqrt(ms + eps);
  Vector out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k] * inv * w[k];
  return out;
}

double activation_value(Activation a, double x) {
  if (a == Activation::relu) return x > 0.0 ? x : 0.0;
  return x / (1.0 + std::exp(-x));
}

double activation_derivative(Activation a, double x) {
  if (a == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

Vector log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double log_sum = std::log(sum);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - mx) - log_sum;
  return out;
}

namespace {

// Normalizes each row of `in` into `out` (scaled by w), recording 1/rms.
void rmsnorm_rows(const Matrix& in, const Matrix& w, double eps, Matrix& out, Vector& inv_rms) {
  const std::size_t d = in.cols();
  out = Matrix(in.rows(), d);
  inv_rms.assign(in.rows(), 0.0);
  for (std::size_t t = 0; t < in.rows(); ++t) {
    auto x = in.row(t);
    const double inv = 1.0 / std::sqrt(squared_norm(x) / static_cast<double>(d) + eps);
    inv_rms[t] = inv;
    auto y = out.row(t);
    for (std::size_t k = 0; k < d; ++k) y[k] = x[k] * inv * w(0, k);
  }
}

// y_rows = x_rows W^T.
Matrix linear_rows(const Matrix& x, const Matrix& w) {
  Matrix y(x.rows(), w.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) matvec(w, x.row(t), y.row(t));
  return y;
}

void check_finite(const Matrix& m, const std::string& where) {
  if (!all_finite(m.flat())) throw NumericError("non-finite value in " + where);
}

// Backward through out = x * inv * w for one row. Accumulates dx and (optionally) dw.
void rmsnorm_row_backward(std::span<const double> x, double inv, std::span<const double> w,
                          std::span<const double> dy, std::span<double> dx,
                          std::span<double> dw) {
  const std::size_t d = x.size();
  double proj = 0.0;
  for (std::size_t k = 0; k < d; ++k) proj += dy[k] * w[k] * x[k];
  const double c = inv * inv * inv * proj / static_cast<double>(d);
  for (std::size_t k = 0; k < d; ++k) {
    dx[k] += inv * w[k] * dy[k] - c * x[k];
    if (!dw.empty()) dw[k] += dy[k] * x[k] * inv;
  }
}

}  // namespace

ForwardTrace forward(const PolicyParams& params, std::span<const int> tokens) {
  const auto& cfg = params.config;
  const auto& W = params.weights;
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len))
    throw InputError(fmt::format("forward: sequence length {} exceeds max_seq_len {}",
                                 tokens.size(), cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw InputError(fmt::format("forward: token id {} out of range", t));

  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  Matrix x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    auto te = W.token_embedding.row(static_cast<std::size_t>(tokens[t]));
    auto pe = W.position_embedding.row(t);
    auto xr = x.row(t);
    for (std::size_t k = 0; k < d; ++k) xr[k] = te[k] + pe[k];
  }

  tr.blocks.resize(W.blocks.size());
  for (std::size_t b = 0; b < W.blocks.size(); ++b) {
    const auto& bw = W.blocks[b];
    auto& bt = tr.blocks[b];
    bt.attn_in = x;
    rmsnorm_rows(x, bw.attn_norm, cfg.rms_eps, bt.attn_normed, bt.attn_inv_rms);
    bt.q = linear_rows(bt.attn_normed, bw.wq);
    bt.k = linear_rows(bt.attn_normed, bw.wk);
    bt.v = linear_rows(bt.attn_normed, bw.wv);

    bt.attn_out = Matrix(T, d);
    bt.probs.assign(H, Matrix(T, T));
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      auto& P = bt.probs[h];
      for (std::size_t i = 0; i < T; ++i) {
        auto qi = bt.q.row(i).subspan(off, dh);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          P(i, j) = scale * dot(qi, bt.k.row(j).subspan(off, dh));
          mx = std::max(mx, P(i, j));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) - mx);
          sum += P(i, j);
        }
        auto oi = bt.attn_out.row(i).subspan(off, dh);
        for (std::size_t j = 0; j <= i; ++j) {
          P(i, j) /= sum;
          auto vj = bt.v.row(j).subspan(off, dh);
          for (std::size_t c = 0; c < dh; ++c) oi[c] += P(i, j) * vj[c];
        }
      }
    }
    bt.attn_proj = linear_rows(bt.attn_out, bw.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x.flat()[i] += bt.attn_proj.flat()[i];
    check_finite(x, fmt::format("blocks.{}.attention", b));
    bt.ffn_in = x;

    rmsnorm_rows(x, bw.ffn_norm, cfg.rms_eps, bt.ffn_normed, bt.ffn_inv_rms);
    bt.gate_pre = linear_rows(bt.ffn_normed, bw.w_gate);
    bt.up = linear_rows(bt.ffn_normed, bw.w_up);
    bt.hidden = Matrix(T, static_cast<std::size_t>(cfg.d_ff));
    for (std::size_t i = 0; i < bt.hidden.size(); ++i)
      bt.hidden.flat()[i] = activation_value(cfg.activation, bt.gate_pre.flat()[i]) * bt.up.flat()[i];
    bt.ffn_proj = linear_rows(bt.hidden, bw.w_down);
    for (std::size_t i = 0; i < x.size(); ++i) x.flat()[i] += bt.ffn_proj.flat()[i];
    check_finite(x, fmt::format("blocks.{}.ffn", b));
  }

  tr.final_in = x;
  rmsnorm_rows(x, W.final_norm, cfg.rms_eps, tr.lm_input, tr.final_inv_rms);
  tr.logits = linear_rows(tr.lm_input, W.lm_head);
  check_finite(tr.logits, "lm_head");
  tr.policy = Matrix(T, static_cast<std::size_t>(cfg.vocab_size));
  for (std::size_t t = 0; t < T; ++t) {
    auto ls = log_softmax(tr.logits.row(t));
    auto p = tr.policy.row(t);
    for (std::size_t v = 0; v < ls.size(); ++v) p[v] = std::exp(ls[v]);
  }
  return tr;
}

namespace {

void check_trace(const PolicyParams& params, const ForwardTrace& trace, const Matrix& dlogits) {
  const auto& cfg = params.config;
  if (trace.blocks.size() != static_cast<std::size_t>(cfg.n_layers) ||
      trace.lm_input.cols() != static_cast<std::size_t>(cfg.d_model) ||
      trace.logits.cols() != static_cast<std::size_t>(cfg.vocab_size))
    throw InputError("backward: trace does not match params");
  if (dlogits.rows() != trace.length() ||
      dlogits.cols() != static_cast<std::size_t>(cfg.vocab_size))
    throw InputError("backward: logit gradient shape must be T x vocab");
}

}  // namespace

void backward_accumulate(const PolicyParams& params, const ForwardTrace& trace,
                         const Matrix& dlogits, Weights& G, OutputGradTaps* taps);

LayerGradients backward(const PolicyParams& params, const ForwardTrace& trace,
                        const Matrix& logit_grads, OutputGradTaps* taps) {
  LayerGradients g{Weights::zeros(params.config)};
  backward_accumulate(params, trace, logit_grads, g.weights, taps);
  return g;
}

void backward_accumulate(const PolicyParams& params, const ForwardTrace& trace,
                         const Matrix& logit_grads, Weights& accum) {
  backward_accumulate(params, trace, logit_grads, accum, nullptr);
}

void backward_accumulate(const PolicyParams& params, const ForwardTrace& trace,
                         const Matrix& dlogits, Weights& G, OutputGradTaps* taps) {
  check_trace(params, trace, dlogits);
  const auto& cfg = params.config;
  const auto& W = params.weights;
  const std::size_t T = trace.length();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (taps) {
    taps->per_block.assign(W.blocks.size(), {});
    for (auto& arr : taps->per_block)
      for (auto kind : kLayerKinds)
        arr[static_cast<int>(kind)] =
            Matrix(T, (kind == LayerKind::gate || kind == LayerKind::up) ? ff : d);
  }

  // lm_head and final norm.
  Matrix dx(T, d);
  {
    Vector dh_vec(d);
    for (std::size_t t = 0; t < T; ++t) {
      auto dz = dlogits.row(t);
      if (squared_norm(dz) == 0.0) continue;
      outer_acc(G.lm_head, dz, trace.lm_input.row(t));
      std::fill(dh_vec.begin(), dh_vec.end(), 0.0);
      matvec_t_acc(W.lm_head, dz, dh_vec);
      rmsnorm_row_backward(trace.final_in.row(t), trace.final_inv_rms[t], W.final_norm.row(0),
                           dh_vec, dx.row(t), G.final_norm.row(0));
    }
  }

  for (std::size_t bi = W.blocks.size(); bi-- > 0;) {
    const auto& bw = W.blocks[bi];
    const auto& bt = trace.blocks[bi];
    auto& bg = G.blocks[bi];

    if (taps) taps->per_block[bi][static_cast<int>(LayerKind::down)] = dx;

    // FFN: x_out = ffn_in + W_down (act(gate) * up).
    Matrix dgate(T, ff), dup(T, ff);
    Matrix dnormed(T, d);
    Vector dhidden(ff);
    for (std::size_t t = 0; t < T; ++t) {
      auto dy = dx.row(t);
      outer_acc(bg.w_down, dy, bt.hidden.row(t));
      std::fill(dhidden.begin(), dhidden.end(), 0.0);
      matvec_t_acc(bw.w_down, dy, dhidden);
      for (std::size_t c = 0; c < ff; ++c) {
        const double g = bt.gate_pre(t, c);
        dgate(t, c) = dhidden[c] * bt.up(t, c) * activation_derivative(cfg.activation, g);
        dup(t, c) = dhidden[c] * activation_value(cfg.activation, g);
      }
      outer_acc(bg.w_gate, dgate.row(t), bt.ffn_normed.row(t));
      outer_acc(bg.w_up, dup.row(t), bt.ffn_normed.row(t));
      matvec_t_acc(bw.w_gate, dgate.row(t), dnormed.row(t));
      matvec_t_acc(bw.w_up, dup.row(t), dnormed.row(t));
      rmsnorm_row_backward(bt.ffn_in.row(t), bt.ffn_inv_rms[t], bw.ffn_norm.row(0),
                           dnormed.row(t), dx.row(t), bg.ffn_norm.row(0));
    }
    // Attention: ffn_in = attn_in + W_O attn_out.
    Matrix dao(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      outer_acc(bg.wo, dx.row(t), bt.attn_out.row(t));
      matvec_t_acc(bw.wo, dx.row(t), dao.row(t));
    }
    Matrix dq(T, d), dk(T, d), dv(T, d);
    Vector dp(T);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const auto& P = bt.probs[h];
      for (std::size_t i = 0; i < T; ++i) {
        auto doi = dao.row(i).subspan(off, dh);
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          dp[j] = dot(doi, bt.v.row(j).subspan(off, dh));
          acc += P(i, j) * dp[j];
          auto dvj = dv.row(j).subspan(off, dh);
          for (std::size_t c = 0; c < dh; ++c) dvj[c] += P(i, j) * doi[c];
        }
        auto qi = bt.q.row(i).subspan(off, dh);
        auto dqi = dq.row(i).subspan(off, dh);
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = P(i, j) * (dp[j] - acc) * scale;
          if (ds == 0.0) continue;
          auto kj = bt.k.row(j).subspan(off, dh);
          auto dkj = dk.row(j).subspan(off, dh);
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
    if (taps) {
      auto& tp = taps->per_block[bi];
      tp[static_cast<int>(LayerKind::o)] = dx;
      tp[static_cast<int>(LayerKind::q)] = dq;
      tp[static_cast<int>(LayerKind::k)] = dk;
      tp[static_cast<int>(LayerKind::v)] = dv;
      tp[static_cast<int>(LayerKind::gate)] = dgate;
      tp[static_cast<int>(LayerKind::up)] = dup;
    }
    Matrix dan(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      outer_acc(bg.wq, dq.row(t), bt.attn_normed.row(t));
      outer_acc(bg.wk, dk.row(t), bt.attn_normed.row(t));
      outer_acc(bg.wv, dv.row(t), bt.attn_normed.row(t));
      matvec_t_acc(bw.wq, dq.row(t), dan.row(t));
      matvec_t_acc(bw.wk, dk.row(t), dan.row(t));
      matvec_t_acc(bw.wv, dv.row(t), dan.row(t));
      rmsnorm_row_backward(bt.attn_in.row(t), bt.attn_inv_rms[t], bw.attn_norm.row(0),
                           dan.row(t), dx.row(t), bg.attn_norm.row(0));
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    auto src = dx.row(t);
    auto te = G.token_embedding.row(static_cast<std::size_t>(trace.tokens[t]));
    auto pe = G.position_embedding.row(t);
    for (std::size_t k = 0; k < d; ++k) {
      te[k] += src[k];
      pe[k] += src[k];
    }
  }
}

std::vector<std::array<Vector, 7>> position_output_grads(const PolicyParams& params,
                                                         const ForwardTrace& trace,
                                                         std::size_t pos,
                                                         std::span<const double> dz) {
  const auto& cfg = params.config;
  const auto& W = params.weights;
  if (pos >= trace.length()) throw InputError("position out of range");
  if (dz.size() != static_cast<std::size_t>(cfg.vocab_size))
    throw InputError("logit direction must have vocab_size entries");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t i = pos;

  std::vector<std::array<Vector, 7>> out(W.blocks.size());
  Vector dx(d, 0.0);
  {
    Vector dhv(d, 0.0);
    matvec_t_acc(W.lm_head, dz, dhv);
    rmsnorm_row_backward(trace.final_in.row(i), trace.final_inv_rms[i], W.final_norm.row(0),
                         dhv, dx, {});
  }
  for (std::size_t bi = W.blocks.size(); bi-- > 0;) {
    const auto& bw = W.blocks[bi];
    const auto& bt = trace.blocks[bi];
    auto& o = out[bi];
    o[static_cast<int>(LayerKind::down)] = dx;

    Vector dhidden(ff, 0.0), dgate(ff), dup(ff), dn(d, 0.0);
    matvec_t_acc(bw.w_down, dx, dhidden);
    for (std::size_t c = 0; c < ff; ++c) {
      const double g = bt.gate_pre(i, c);
      dgate[c] = dhidden[c] * bt.up(i, c) * activation_derivative(cfg.activation, g);
      dup[c] = dhidden[c] * activation_value(cfg.activation, g);
    }
    matvec_t_acc(bw.w_gate, dgate, dn);
    matvec_t_acc(bw.w_up, dup, dn);
    rmsnorm_row_backward(bt.ffn_in.row(i), bt.ffn_inv_rms[i], bw.ffn_norm.row(0), dn, dx, {});
    o[static_cast<int>(LayerKind::gate)] = std::move(dgate);
    o[static_cast<int>(LayerKind::up)] = std::move(dup);
    o[static_cast<int>(LayerKind::o)] = dx;

    // Only q_i, k_i, v_i are position-i outputs; keys/values of earlier positions stay fixed.
    Vector dao(d, 0.0), dq(d, 0.0), dk(d, 0.0), dv(d, 0.0);
    matvec_t_acc(bw.wo, dx, dao);
    Vector dp(i + 1);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const auto& P = bt.probs[h];
      std::span<const double> doi(dao.data() + off, dh);
      double acc = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        dp[j] = dot(doi, bt.v.row(j).subspan(off, dh));
        acc += P(i, j) * dp[j];
      }
      for (std::size_t c = 0; c < dh; ++c) dv[off + c] = P(i, i) * doi[c];
      for (std::size_t j = 0; j <= i; ++j) {
        const double ds = P(i, j) * (dp[j] - acc) * scale;
        auto kj = bt.k.row(j).subspan(off, dh);
        for (std::size_t c = 0; c < dh; ++c) dq[off + c] += ds * kj[c];
        if (j == i)
          for (std::size_t c = 0; c < dh; ++c) dk[off + c] += ds * bt.q(i, off + c);
      }
    }
    Vector dan(d, 0.0);
    matvec_t_acc(bw.wq, dq, dan);
    matvec_t_acc(bw.wk, dk, dan);
    matvec_t_acc(bw.wv, dv, dan);
    rmsnorm_row_backward(bt.attn_in.row(i), bt.attn_inv_rms[i], bw.attn_norm.row(0), dan, dx, {});
    o[static_cast<int>(LayerKind::q)] = std::move(dq);
    o[static_cast<int>(LayerKind::k)] = std::move(dk);
    o[static_cast<int>(LayerKind::v)] = std::move(dv);
  }
  return out;
}

std::vector<std::array<Matrix, 7>> all_logit_jacobians(const PolicyParams& params,
                                                       const ForwardTrace& trace,
                                                       std::size_t pos) {
  const auto& cfg = params.config;
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  std::vector<std::array<Matrix, 7>> J(static_cast<std::size_t>(cfg.n_layers));
  for (auto& arr : J)
    for (auto kind : kLayerKinds)
      arr[static_cast<int>(kind)] = Matrix(
          V, static_cast<std::size_t>((kind == LayerKind::gate || kind == LayerKind::up)
                                          ? cfg.d_ff
                                          : cfg.d_model));
  Vector e(V, 0.0);
  for (std::size_t row = 0; row < V; ++row) {
    e[row] = 1.0;
    auto g = position_output_grads(params, trace, pos, e);
    e[row] = 0.0;
    for (std::size_t b = 0; b < J.size(); ++b)
      for (int k = 0; k < 7; ++k) std::copy(g[b][k].begin(), g[b][k].end(), J[b][k].row(row).begin());
  }
  return J;
}

LayerId parse_layer_name(std::string_view name) {
  if (name == "lm_head") throw InputError("Jacobian defined only for intermediate layers");
  for (int b = 0; b < 64; ++b)
    for (auto k : kLayerKinds)
      if (LayerId{b, k}.name() == name) return {b, k};
  throw InputError(fmt::format("'{}' is not an intermediate linear layer", name));
}

Matrix logit_jacobian(const PolicyParams& params, const ForwardTrace& trace,
                      std::string_view layer_name, std::size_t pos) {
  return logit_jacobian(params, trace, parse_layer_name(layer_name), pos);
}

Matrix logit_jacobian(const PolicyParams& params, const ForwardTrace& trace, LayerId layer,
                      std::size_t pos) {
  if (layer.block < 0 || layer.block >= params.config.n_layers)
    throw InputError("Jacobian defined only for intermediate layers");
  auto all = all_logit_jacobians(params, trace, pos);
  return std::move(all[static_cast<std::size_t>(layer.block)][static_cast<int>(layer.kind)]);
}

SampledToken sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw InputError("temperature must be > 0");
  if (logits.empty()) throw InputError("empty logits");
  if (!all_finite(logits)) throw NumericError("non-finite logits");
  Vector scaled(logits.begin(), logits.end());
  for (double& z : scaled) z /= temperature;
  const Vector lp_t = log_softmax(scaled);
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t pick = lp_t.size();
  std::size_t last_nonzero = 0;
  for (std::size_t v = 0; v < lp_t.size(); ++v) {
    const double p = std::exp(lp_t[v]);
    if (p > 0.0) last_nonzero = v;
    cum += p;
    if (u < cum) {
      pick = v;
      break;
    }
  }
  // Rounding can leave the cumulative sum a hair below 1.
  if (pick == lp_t.size()) pick = last_nonzero;
  const Vector lp = log_softmax(logits);
  return {static_cast<int>(pick), lp[pick]};
}

}  // namespace grlvr
