#include "motionpred/seq_nets.hpp"

#include <cmath>
#include <limits>

#include "motionpred/error.hpp"

namespace motionpred {

std::vector<double> periodic_pos_enc(std::size_t t, std::size_t period, std::size_t width) {
  if (period == 0) throw ValidationError("periodic_pos_enc: period must be >= 1");
  const double p = static_cast<double>(t % period);
  std::vector<double> enc(width);
  for (std::size_t i = 0; i < width; ++i) {
    const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(width);
    const double angle = p / std::pow(10000.0, expo);
    enc[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return enc;
}

Tensor periodic_pos_table(std::size_t length, std::size_t period, std::size_t width) {
  std::vector<double> data;
  data.reserve(length * width);
  for (std::size_t t = 0; t < length; ++t) {
    auto row = periodic_pos_enc(t, period, width);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor::constant({length, width}, std::move(data));
}

AttentionMask periodic_causal_mask(std::size_t length, std::size_t period) {
  if (length == 0 || period == 0) {
    throw ValidationError("periodic_causal_mask: length and period must be >= 1");
  }
  AttentionMask m{length, length, std::vector<double>(length * length)};
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j < length; ++j)
      m.bias[i * length + j] = j > i ? -std::numeric_limits<double>::infinity()
                                     : -static_cast<double>((i - j) / period);
  return m;
}

AttentionMask prefixed_periodic_causal_mask(std::size_t frames, std::size_t period) {
  const auto inner = periodic_causal_mask(frames, period);
  const std::size_t n = frames + 1;
  AttentionMask m{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 1; i < n; ++i) {
    m.bias[i * n] = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 1; j < n; ++j) m.bias[i * n + j] = inner.at(i - 1, j - 1);
  }
  return m;
}

std::vector<std::size_t> repeat_index(std::size_t items, std::size_t times) {
  std::vector<std::size_t> idx;
  idx.reserve(items * times);
  for (std::size_t i = 0; i < items; ++i)
    for (std::size_t k = 0; k < times; ++k) idx.push_back(i);
  return idx;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng, double init_scale) {
  Linear l;
  l.weight = store.add_normal(name + ".weight", {in, out},
                              init_scale / std::sqrt(static_cast<double>(in)), rng);
  l.bias = store.add_constant(name + ".bias", {out}, 0.0);
  return l;
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t width) {
  return LayerNorm{store.add_constant(name + ".gain", {width}, 1.0),
                   store.add_constant(name + ".bias", {width}, 0.0)};
}

Mlp Mlp::create(ParamStore& store, const std::string& name,
                const std::vector<std::size_t>& widths, Rng& rng, double last_init_scale) {
  if (widths.size() < 2) throw ValidationError("Mlp needs at least input and output widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(Linear::create(store, name + ".l" + std::to_string(i), widths[i],
                                      widths[i + 1], rng, last ? last_init_scale : 1.0));
  }
  return m;
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& name,
                                              std::size_t width, std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ValidationError("attention width " + std::to_string(width) +
                          " not divisible by heads " + std::to_string(heads));
  }
  MultiHeadAttention a;
  a.query = Linear::create(store, name + ".q", width, width, rng);
  a.key = Linear::create(store, name + ".k", width, width, rng);
  a.value = Linear::create(store, name + ".v", width, width, rng);
  a.output = Linear::create(store, name + ".o", width, width, rng);
  a.heads = heads;
  return a;
}

Tensor MultiHeadAttention::self_attend(const Tensor& tokens, std::size_t batch,
                                       const AttentionMask* mask) const {
  NameScope scope("mhsa");
  return output(attention(query(tokens), key(tokens), value(tokens), batch, heads, mask));
}

Tensor MultiHeadAttention::cross_attend(const Tensor& queries, const Tensor& kv,
                                        std::size_t batch) const {
  NameScope scope("mhca");
  if (queries.cols() != kv.cols()) {
    throw ShapeError("mhca in " + current_scope() + ": query width " +
                     std::to_string(queries.cols()) + " vs key/value width " +
                     std::to_string(kv.cols()));
  }
  return output(attention(query(queries), key(kv), value(kv), batch, heads));
}

NdValue MultiHeadAttention::self_probs(const Tensor& tokens, std::size_t batch,
                                       const AttentionMask* mask) const {
  NoGradGuard no_grad;
  return attention_probs(query(tokens), key(tokens), batch, heads, mask);
}

EncoderLayer EncoderLayer::create(ParamStore& store, const std::string& name, std::size_t width,
                                  std::size_t heads, std::size_t ffn_width, Rng& rng) {
  return EncoderLayer{LayerNorm::create(store, name + ".ln_attn", width),
                      MultiHeadAttention::create(store, name + ".attn", width, heads, rng),
                      LayerNorm::create(store, name + ".ln_ffn", width),
                      Mlp::create(store, name + ".ffn", {width, ffn_width, width}, rng)};
}

Tensor EncoderLayer::operator()(const Tensor& x, std::size_t batch,
                                const AttentionMask* mask) const {
  Tensor h = add(x, attn.self_attend(norm_attn(x), batch, mask));
  return add(h, ffn(norm_ffn(h)));
}

CrossLayer CrossLayer::create(ParamStore& store, const std::string& name, std::size_t width,
                              std::size_t heads, std::size_t ffn_width, Rng& rng) {
  return CrossLayer{LayerNorm::create(store, name + ".ln_q", width),
                    LayerNorm::create(store, name + ".ln_kv", width),
                    MultiHeadAttention::create(store, name + ".attn", width, heads, rng),
                    LayerNorm::create(store, name + ".ln_ffn", width),
                    Mlp::create(store, name + ".ffn", {width, ffn_width, width}, rng)};
}

Tensor CrossLayer::operator()(const Tensor& q, const Tensor& kv, std::size_t batch) const {
  Tensor h = add(q, attn.cross_attend(norm_query(q), norm_kv(kv), batch));
  return add(h, ffn(norm_ffn(h)));
}

SequenceEncoder::SequenceEncoder(ParamStore& store, const std::string& name,
                                 const SequenceEncoderConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  summary_token_ = store.add_normal(name + ".token", {1, cfg.width}, 0.02, rng);
  input_ = Linear::create(store, name + ".input", cfg.input_width, cfg.width, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    layers_.push_back(EncoderLayer::create(store, name + ".layer" + std::to_string(i), cfg.width,
                                           cfg.heads, cfg.ffn_width, rng));
  }
  final_norm_ = LayerNorm::create(store, name + ".ln_out", cfg.width);
}

Tensor SequenceEncoder::encode_tokens(const Tensor& frames, std::size_t batch) const {
  if (batch == 0 || frames.rows() % batch != 0 || frames.rows() == 0) {
    throw ShapeError("sequence encoder: " + std::to_string(frames.rows()) +
                     " frame rows for batch " + std::to_string(batch));
  }
  if (frames.cols() != cfg_.input_width) {
    throw ShapeError("sequence encoder in " + current_scope() + ": frame width " +
                     std::to_string(frames.cols()) + ", expected " +
                     std::to_string(cfg_.input_width));
  }
  const std::size_t len = frames.rows() / batch;
  Tensor pos = periodic_pos_table(len, cfg_.period, cfg_.width);
  const auto tile = [&] {
    std::vector<std::size_t> idx;
    idx.reserve(batch * len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) idx.push_back(t);
    return idx;
  }();
  Tensor proj = add(input_(frames), gather_rows(pos, tile));

  // Interleave: [token, frames of item 0, token, frames of item 1, ...].
  Tensor stacked = concat_rows({gather_rows(summary_token_, std::vector<std::size_t>(batch, 0)), proj});
  std::vector<std::size_t> order;
  order.reserve(batch * (len + 1));
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(b);
    for (std::size_t t = 0; t < len; ++t) order.push_back(batch + b * len + t);
  }
  Tensor h = gather_rows(stacked, order);

  AttentionMask mask;
  const AttentionMask* mask_ptr = nullptr;
  if (cfg_.mask == MaskKind::periodic_causal) {
    mask = prefixed_periodic_causal_mask(len, cfg_.period);
    mask_ptr = &mask;
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    NameScope scope("layer" + std::to_string(i));
    h = layers_[i](h, batch, mask_ptr);
  }
  return final_norm_(h);
}

Tensor SequenceEncoder::encode(const Tensor& frames, std::size_t batch) const {
  Tensor h = encode_tokens(frames, batch);
  const std::size_t len = h.rows() / batch;
  std::vector<std::size_t> heads(batch);
  for (std::size_t b = 0; b < batch; ++b) heads[b] = b * len;
  return gather_rows(h, heads);
}

}  // namespace motionpred
