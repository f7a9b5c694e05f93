#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "motionpred/error.hpp"
#include "motionpred/grad_check.hpp"
#include "motionpred/seq_nets.hpp"

using namespace motionpred;

namespace {

Tensor random_tokens(std::size_t rows, std::size_t width, Rng& rng) {
  NdValue v({rows, width});
  for (auto& x : v.data) x = rng.normal();
  return Tensor::leaf(std::move(v), false);
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  auto d = t.data();
  return {d.begin() + static_cast<long>(r * t.cols()),
          d.begin() + static_cast<long>((r + 1) * t.cols())};
}

}  // namespace

TEST_CASE("mhsa on a single token returns its value projection") {
  Rng rng(1);
  ParamStore store;
  auto attn = MultiHeadAttention::create(store, "attn", 8, 4, rng);
  Tensor x = random_tokens(1, 8, rng);
  Tensor out = attn.self_attend(x, 1);
  Tensor expected = attn.output(attn.value(x));
  for (std::size_t i = 0; i < 8; ++i) CHECK(out.data()[i] == doctest::Approx(expected.data()[i]));
}

TEST_CASE("mhsa attention rows sum to one") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    ParamStore store;
    auto attn = MultiHeadAttention::create(store, "attn", 16, 4, rng);
    Tensor x = random_tokens(2 * 6, 16, rng);
    auto mask = periodic_causal_mask(6, 4);
    const AttentionMask* masks[] = {nullptr, &mask};
    for (const AttentionMask* m : masks) {
      auto probs = attn.self_probs(x, 2, m);
      for (std::size_t r = 0; r < probs.rows(); ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < probs.cols(); ++c) total += probs.data[r * probs.cols() + c];
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("periodic causal mask keeps earlier outputs independent of later tokens") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 500);
    ParamStore store;
    auto layer = EncoderLayer::create(store, "l", 16, 4, 32, rng);
    const std::size_t len = 9;
    auto mask = periodic_causal_mask(len, 3);
    Tensor x = random_tokens(len, 16, rng);
    const std::size_t t = static_cast<std::size_t>(rng.integer(1, len - 1));
    NdValue perturbed = x.value();
    for (std::size_t c = 0; c < 16; ++c) perturbed.data[t * 16 + c] += rng.normal();
    Tensor y0 = layer(x, 1, &mask);
    Tensor y1 = layer(Tensor::leaf(perturbed, false), 1, &mask);
    for (std::size_t r = 0; r < t; ++r) CHECK(row_of(y0, r) == row_of(y1, r));
    CHECK(row_of(y0, t) != row_of(y1, t));
  }
}

TEST_CASE("mhca with one key/value token returns its value projection everywhere") {
  Rng rng(4);
  ParamStore store;
  auto attn = MultiHeadAttention::create(store, "x", 8, 4, rng);
  Tensor q = random_tokens(5, 8, rng);
  Tensor kv = random_tokens(1, 8, rng);
  Tensor out = attn.cross_attend(q, kv, 1);
  Tensor expected = attn.output(attn.value(kv));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(r, c) == doctest::Approx(expected.at(0, c)));
}

TEST_CASE("mhca output has the query length") {
  Rng rng(5);
  ParamStore store;
  auto attn = MultiHeadAttention::create(store, "x", 16, 4, rng);
  Tensor out = attn.cross_attend(random_tokens(40, 16, rng), random_tokens(4, 16, rng), 1);
  CHECK(out.shape() == Shape{40, 16});
}

TEST_CASE("mhca rejects width mismatch") {
  Rng rng(5);
  ParamStore store;
  auto attn = MultiHeadAttention::create(store, "x", 16, 4, rng);
  CHECK_THROWS_AS((void)attn.cross_attend(random_tokens(4, 16, rng), random_tokens(4, 8, rng), 1),
                  ShapeError);
}

TEST_CASE("mhca is invariant to key/value order") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 40);
    ParamStore store;
    auto attn = MultiHeadAttention::create(store, "x", 16, 4, rng);
    Tensor q = random_tokens(7, 16, rng);
    Tensor kv = random_tokens(4, 16, rng);
    const std::size_t perm[] = {2, 0, 3, 1};
    Tensor a = attn.cross_attend(q, kv, 1);
    Tensor b = attn.cross_attend(q, gather_rows(kv, perm), 1);
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("periodic positional encoding") {
  CHECK(periodic_pos_enc(0, 25, 64) == periodic_pos_enc(25, 25, 64));
  CHECK(periodic_pos_enc(7, 25, 64) == periodic_pos_enc(57, 25, 64));
  auto a = periodic_pos_enc(3, 25, 64);
  auto b = periodic_pos_enc(4, 25, 64);
  double d2 = 0.0;
  for (std::size_t i = 0; i < 64; ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(std::sqrt(d2) > 0.1);
  for (std::size_t t = 0; t < 60; ++t)
    for (double v : periodic_pos_enc(t, 25, 64)) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
}

TEST_CASE("periodic causal mask entries") {
  auto one = periodic_causal_mask(1, 25);
  REQUIRE(one.bias.size() == 1);
  CHECK(one.bias[0] == 0.0);
  const std::size_t period = 4;
  auto m = periodic_causal_mask(12, period);
  CHECK(m.at(5, 6) == -std::numeric_limits<double>::infinity());
  CHECK(m.at(5, 5) == 0.0);
  CHECK(m.at(2 * period, 0) == -2.0);
  CHECK(m.at(7, 4) == 0.0);
  CHECK(m.at(7, 3) == -1.0);
}

TEST_CASE("mlp: identity initialization and zero input") {
  Rng rng(2);
  ParamStore store;
  auto lin = Linear::create(store, "id", 4, 4, rng);
  auto w = lin.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
  Mlp single{{lin}};
  Tensor x = random_tokens(2, 4, rng);
  Tensor y = single(x);
  for (std::size_t i = 0; i < 8; ++i) CHECK(y.data()[i] == x.data()[i]);

  auto deep = Mlp::create(store, "deep", {4, 16, 16, 3}, rng);
  Tensor z = deep(Tensor::zeros({1, 4}));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("mlp, mhsa and mhca gradients match finite differences at width 8") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 900);
    {
      ParamStore store;
      auto mlp = Mlp::create(store, "mlp", {5, 8, 8, 3}, rng);
      Tensor x = random_tokens(3, 5, rng);
      auto report = grad_check([&] { return sum(square(mlp(x))); }, store, 1e-3);
      CHECK_MESSAGE(report.passed, "mlp seed " << seed << " err " << report.max_rel_error);
    }
    {
      ParamStore store;
      auto layer = EncoderLayer::create(store, "mhsa", 8, 4, 16, rng);
      auto mask = periodic_causal_mask(3, 2);
      Tensor x = random_tokens(3, 8, rng);
      auto report = grad_check([&] { return sum(square(layer(x, 1, &mask))); }, store, 1e-3);
      CHECK_MESSAGE(report.passed, "mhsa seed " << seed << " err " << report.max_rel_error);
    }
    {
      ParamStore store;
      auto layer = CrossLayer::create(store, "mhca", 8, 4, 16, rng);
      Tensor q = random_tokens(3, 8, rng);
      Tensor kv = random_tokens(4, 8, rng);
      auto report = grad_check([&] { return sum(square(layer(q, kv, 1))); }, store, 1e-3);
      CHECK_MESSAGE(report.passed, "mhca seed " << seed << " err " << report.max_rel_error);
    }
  }
}

TEST_CASE("sequence encoder output width and batching") {
  Rng rng(8);
  ParamStore store;
  SequenceEncoderConfig cfg{.input_width = 6, .width = 16, .heads = 4, .layers = 2,
                            .ffn_width = 32, .period = 25, .mask = MaskKind::periodic_causal};
  SequenceEncoder enc(store, "enc", cfg, rng);
  Tensor frames = random_tokens(3 * 7, 6, rng);
  Tensor out = enc.encode(frames, 3);
  CHECK(out.shape() == Shape{3, 16});
  // Batched result equals per-item result.
  Tensor single = enc.encode(slice_rows(frames, 7, 7), 1);
  for (std::size_t c = 0; c < 16; ++c) CHECK(single.at(0, c) == doctest::Approx(out.at(1, c)));
  CHECK_THROWS_AS((void)enc.encode(random_tokens(7, 5, rng), 1), ShapeError);
}
