#pragma once

// Attention building blocks shared by the in-betweening VAE, the diffusion
// generator and the action classifier. Token batches are laid out as a
// single [batch * length, width] matrix with every item of equal length.

#include <cstddef>
#include <string>
#include <vector>

#include "motionpred/ops.hpp"
#include "motionpred/param_store.hpp"
#include "motionpred/rng.hpp"

namespace motionpred {

/// Sinusoidal encoding of (t mod period); enc(t) == enc(t + period).
std::vector<double> periodic_pos_enc(std::size_t t, std::size_t period, std::size_t width);

/// [length, width] table of periodic encodings for timesteps 0..length-1.
Tensor periodic_pos_table(std::size_t length, std::size_t period, std::size_t width);

enum class MaskKind { none, periodic_causal };

/// Additive mask: -inf above the diagonal, -floor((i - j) / period) elsewhere,
/// so keys in nearer periods receive larger weight.
AttentionMask periodic_causal_mask(std::size_t length, std::size_t period);

/// Causal mask over frames with a leading summary token that reads every
/// frame. Frames never attend to the summary token, so no future information
/// reaches an earlier frame through it.
AttentionMask prefixed_periodic_causal_mask(std::size_t frames, std::size_t period);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(ParamStore& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng, double init_scale = 1.0);
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
  std::size_t in_width() const { return weight.rows(); }
  std::size_t out_width() const { return weight.cols(); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

/// Affine layers with GELU between them; the last layer is linear.
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParamStore& store, const std::string& name,
                    const std::vector<std::size_t>& widths, Rng& rng,
                    double last_init_scale = 1.0);
  Tensor operator()(const Tensor& x) const;
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 4;

  static MultiHeadAttention create(ParamStore& store, const std::string& name, std::size_t width,
                                   std::size_t heads, Rng& rng);

  /// Self attention over [batch * length, width] tokens.
  Tensor self_attend(const Tensor& tokens, std::size_t batch,
                     const AttentionMask* mask = nullptr) const;
  /// Cross attention: queries [batch * tq, width] read keys/values
  /// [batch * tk, width]. Output has the query length.
  Tensor cross_attend(const Tensor& queries, const Tensor& kv, std::size_t batch) const;
  /// Per-head attention probabilities of self_attend (diagnostics).
  NdValue self_probs(const Tensor& tokens, std::size_t batch,
                     const AttentionMask* mask = nullptr) const;
};

/// Pre-norm transformer layer: x + MHSA(LN(x)), then x + FFN(LN(x)).
struct EncoderLayer {
  LayerNorm norm_attn;
  MultiHeadAttention attn;
  LayerNorm norm_ffn;
  Mlp ffn;

  static EncoderLayer create(ParamStore& store, const std::string& name, std::size_t width,
                             std::size_t heads, std::size_t ffn_width, Rng& rng);
  Tensor operator()(const Tensor& x, std::size_t batch, const AttentionMask* mask) const;
};

/// Pre-norm cross-attention layer: q + MHCA(LN(q), LN(kv)), then q + FFN(LN(q)).
struct CrossLayer {
  LayerNorm norm_query;
  LayerNorm norm_kv;
  MultiHeadAttention attn;
  LayerNorm norm_ffn;
  Mlp ffn;

  static CrossLayer create(ParamStore& store, const std::string& name, std::size_t width,
                           std::size_t heads, std::size_t ffn_width, Rng& rng);
  Tensor operator()(const Tensor& q, const Tensor& kv, std::size_t batch) const;
};

struct SequenceEncoderConfig {
  std::size_t input_width = 0;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_width = 128;
  std::size_t period = 25;
  MaskKind mask = MaskKind::none;
};

/// Learnable summary token prefixed to projected frames plus periodic
/// positional encoding, an MHSA stack, and the summary token's output as the
/// sequence embedding.
class SequenceEncoder {
 public:
  SequenceEncoder() = default;
  SequenceEncoder(ParamStore& store, const std::string& name, const SequenceEncoderConfig& cfg,
                  Rng& rng);

  /// frames: [batch * length, input_width]. Returns [batch, width].
  Tensor encode(const Tensor& frames, std::size_t batch) const;
  /// All token outputs [batch * (length + 1), width], summary token first.
  Tensor encode_tokens(const Tensor& frames, std::size_t batch) const;
  const SequenceEncoderConfig& config() const { return cfg_; }

 private:
  SequenceEncoderConfig cfg_;
  Tensor summary_token_;
  Linear input_;
  std::vector<EncoderLayer> layers_;
  LayerNorm final_norm_;
};

/// Row indices that repeat each of `items` rows `times` times in order.
std::vector<std::size_t> repeat_index(std::size_t items, std::size_t times);

}  // namespace motionpred
