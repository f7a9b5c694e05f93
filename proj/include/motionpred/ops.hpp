#pragma once

// Differentiable array ops. Matrices are rank-2 row-major; a rank-1 value of
// length n behaves as a 1 x n row.

#include <cstddef>
#include <span>
#include <vector>

#include "motionpred/tensor.hpp"

namespace motionpred {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a [n, m] plus row vector b [m] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& b);
/// a [n, m] times row vector b [m] broadcast over rows.
Tensor mul_row(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Gradient is taken as 0 at 0.
Tensor sqrt(const Tensor& a);
Tensor gelu(const Tensor& a);
/// Clamp with zero gradient outside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Per-row sum: [n, m] -> [n, 1].
Tensor row_sum(const Tensor& a);
/// Element-wise minimum over a list of scalars; gradient flows to the first argmin.
Tensor min_of(const std::vector<Tensor>& scalars);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
/// out[i] = a[index[i]]; repeated indices accumulate in backward.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);

Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Mean cross-entropy of logits [n, c] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
/// log|det A| for square A, via partially pivoted LU. Gradient is A^{-T}.
Tensor logabsdet(const Tensor& a);

/// Additive attention bias of shape [tq, tk]; -inf forbids a position.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> bias;

  double at(std::size_t i, std::size_t j) const { return bias[i * cols + j]; }
};

/// Scaled dot-product attention, batched and split into heads.
/// q: [batch*tq, d], k and v: [batch*tk, d]; every batch item uses the same
/// lengths and mask. Returns the concatenated head outputs [batch*tq, d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                 std::size_t heads, const AttentionMask* mask = nullptr);

/// Attention probabilities for the same inputs, rows laid out as
/// [batch][head][tq] with tk columns. Not differentiable.
NdValue attention_probs(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads,
                        const AttentionMask* mask = nullptr);

}  // namespace motionpred
