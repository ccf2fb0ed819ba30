#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "grlvr/rng.hpp"
#include "grlvr/tensor.hpp"

namespace grlvr {

enum class Activation : std::uint8_t { silu = 0, relu = 1 };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 64;
  int vocab_size = 64;
  int max_seq_len = 32;
  double rms_eps = 1e-5;
  Activation activation = Activation::silu;

  /// Throws InputError when an invariant is broken.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

/// The seven linear maps inside a block whose inputs the activation bounds cover.
enum class LayerKind : std::uint8_t { q, k, v, o, gate, up, down };

inline constexpr std::array<LayerKind, 7> kLayerKinds = {
    LayerKind::q, LayerKind::k, LayerKind::v, LayerKind::o,
    LayerKind::gate, LayerKind::up, LayerKind::down};

std::string_view to_string(LayerKind k);

struct LayerId {
  int block = 0;
  LayerKind kind = LayerKind::q;

  /// Weight name, e.g. "blocks.1.w_up".
  std::string name() const;
  bool operator==(const LayerId&) const = default;
};

/// Every intermediate layer of a model, block-major in kLayerKinds order.
std::vector<LayerId> intermediate_layers(const ModelConfig& cfg);

struct BlockWeights {
  Matrix attn_norm;  // 1 x d
  Matrix wq, wk, wv, wo;  // d x d
  Matrix ffn_norm;  // 1 x d
  Matrix w_gate, w_up;  // d_ff x d
  Matrix w_down;  // d x d_ff

  Matrix& linear(LayerKind kind);
  const Matrix& linear(LayerKind kind) const;

  bool operator==(const BlockWeights&) const = default;
};

/// Named tensor handle for generic iteration over a Weights value.
template <typename M>
struct NamedTensor {
  std::string name;
  M* tensor;
};

/// All trainable tensors of the policy, shaped by a ModelConfig.
///
/// Canonical tensor order (checkpoint layout, optimizer state, metrics):
///   token_embedding, position_embedding,
///   per block b: blocks.b.{attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down},
///   final_norm, lm_head.
struct Weights {
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_seq_len x d
  std::vector<BlockWeights> blocks;
  Matrix final_norm;  // 1 x d
  Matrix lm_head;     // vocab x d

  static Weights zeros(const ModelConfig& cfg);

  std::vector<NamedTensor<Matrix>> tensors();
  std::vector<NamedTensor<const Matrix>> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  bool same_shape(const Weights& o) const;

  bool operator==(const Weights&) const = default;
};

/// this += scale * other (shapes must match).
void axpy(Weights& self, double scale, const Weights& other);
void scale(Weights& self, double s);

struct PolicyParams {
  ModelConfig config;
  Weights weights;

  bool operator==(const PolicyParams&) const = default;
};

/// Embeddings and linear weights ~ N(0, std^2); RMSNorm scales = 1.
PolicyParams init_params(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02);

struct LayerGradients {
  Weights weights;

  const Matrix& lm_head() const { return weights.lm_head; }
  const Matrix& linear(LayerId id) const { return weights.blocks.at(id.block).linear(id.kind); }
  double lm_head_energy() const { return frobenius_sq(weights.lm_head); }
  double energy(LayerId id) const { return frobenius_sq(linear(id)); }
  /// Sum of squared entries over every tensor.
  double global_energy() const;
};

struct BlockTrace {
  Matrix attn_in;       // residual stream entering the block
  Vector attn_inv_rms;  // 1/sqrt(mean(v^2)+eps) per position
  Matrix attn_normed;   // input to wq/wk/wv
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T lower-triangular attention weights
  Matrix attn_out;            // concatenated heads, input to wo
  Matrix attn_proj;           // wo output
  Matrix ffn_in;              // residual stream after attention
  Vector ffn_inv_rms;
  Matrix ffn_normed;  // input to w_gate/w_up
  Matrix gate_pre;    // w_gate output
  Matrix up;          // w_up output
  Matrix hidden;      // act(gate_pre) * up, input to w_down
  Matrix ffn_proj;    // w_down output
};

/// Every intermediate quantity of one forward pass, one row per position.
/// Position t's logits predict token t+1.
struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<BlockTrace> blocks;
  Matrix final_in;  // v_L
  Vector final_inv_rms;
  Matrix lm_input;  // h_L
  Matrix logits;
  Matrix policy;  // softmax(logits), stored as computed

  std::size_t length() const { return tokens.size(); }
  std::span<const double> lm_head_input(std::size_t pos) const { return lm_input.row(pos); }
  std::span<const double> logits_at(std::size_t pos) const { return logits.row(pos); }
  std::span<const double> policy_at(std::size_t pos) const { return policy.row(pos); }
  /// The x^int entering an intermediate linear layer at a position.
  std::span<const double> intermediate_input(LayerId id, std::size_t pos) const;
  /// The layer's pre-activation output y = W x^int at a position.
  std::span<const double> intermediate_output(LayerId id, std::size_t pos) const;
};

/// out_k = v_k / sqrt(mean(v^2) + eps) * w_k.
Vector rmsnorm(std::span<const double> v, std::span<const double> w, double eps);

double activation_value(Activation a, double x);
double activation_derivative(Activation a, double x);

ForwardTrace forward(const PolicyParams& params, std::span<const int> tokens);

/// Upstream gradients d/dy at every intermediate layer output, one T x out matrix per layer,
/// indexed [block][kind].
struct OutputGradTaps {
  std::vector<std::array<Matrix, 7>> per_block;
  const Matrix& at(LayerId id) const {
    return per_block.at(id.block)[static_cast<int>(id.kind)];
  }
};

/// Gradient of sum_t <logit_grads.row(t), z_t> with respect to every weight.
/// logit_grads is T x vocab; rows of inactive positions are zero.
LayerGradients backward(const PolicyParams& params, const ForwardTrace& trace,
                        const Matrix& logit_grads, OutputGradTaps* taps = nullptr);

/// Adds backward()'s result into an existing accumulator (same semantics, no allocation
/// of a fresh gradient set).
void backward_accumulate(const PolicyParams& params, const ForwardTrace& trace,
                         const Matrix& logit_grads, Weights& accum);

/// Gradient of <dz, z_pos> with respect to y_pos of every intermediate layer, holding
/// the outputs at every other position fixed. Result indexed [block][kind].
std::vector<std::array<Vector, 7>> position_output_grads(const PolicyParams& params,
                                                         const ForwardTrace& trace,
                                                         std::size_t pos,
                                                         std::span<const double> dz);

/// Exact dense J = dz_pos/dy_pos (vocab x out_dim) for one intermediate layer.
Matrix logit_jacobian(const PolicyParams& params, const ForwardTrace& trace, LayerId layer,
                      std::size_t pos);

/// Same, addressed by weight name. "lm_head" (or any non-intermediate name) is an InputError.
Matrix logit_jacobian(const PolicyParams& params, const ForwardTrace& trace,
                      std::string_view layer_name, std::size_t pos);

/// Inverse of LayerId::name(); rejects lm_head and non-linear tensors.
LayerId parse_layer_name(std::string_view name);

/// Jacobians of every intermediate layer at one position, indexed [block][kind].
std::vector<std::array<Matrix, 7>> all_logit_jacobians(const PolicyParams& params,
                                                       const ForwardTrace& trace,
                                                       std::size_t pos);

struct SampledToken {
  int token = 0;
  double logprob = 0.0;  // temperature-1 log-probability
};

SampledToken sample_token(std::span<const double> logits, double temperature, Rng& rng);

/// Numerically stable log-softmax.
Vector log_softmax(std::span<const double> logits);

}  // namespace grlvr
