#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "vitprune/tensor.hpp"

namespace vitprune::ops {

using Index = std::vector<std::size_t>;

// ---- linear algebra -------------------------------------------------------

/// [M×K]·[K×P] → [M×P].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x·W + b with x [N×in], W [in×out], b [out] (optional).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);
/// Row-broadcast: x [N×D] with v [D].
Tensor add_row(const Tensor& x, const Tensor& v);
Tensor mul_row(const Tensor& x, const Tensor& v);
/// Exact erf form.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- normalisation --------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-6f);

// ---- softmax / attention --------------------------------------------------

Tensor softmax_rows(const Tensor& logits);
/// Row i: exp(A_ij)·M_ij / Σ_k exp(A_ik)·M_ik, stabilised by the max over
/// unmasked entries. Differentiable in both logits and mask.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

/// Fused multi-head self-attention core on packed projections.
///
/// `qkv` is [N×3D] laid out as [Q | K | V], heads split each D block
/// contiguously. Logits per head are QKᵀ/√d_k, plus `col_bias[j]` on column j
/// when given (constant, no gradient), then masked_softmax with the shared
/// mask (or a plain softmax). Output is the concatenated per-head context,
/// [N×D]; the output projection is not included.
Tensor multi_head_attention(const Tensor& qkv, std::size_t heads, const Tensor* mask = nullptr,
                            std::span<const float> col_bias = {});

// ---- indexing -------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx);
/// `base` with rows `idx` replaced by the rows of `src`.
Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> idx, const Tensor& base);
Tensor slice_cols(const Tensor& x, std::size_t offset, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// One output row as a weighted sum of input rows.
struct RowMix {
  std::vector<std::size_t> rows;
  std::vector<float> weights;
};
Tensor combine_rows(const Tensor& x, std::span<const RowMix> mixes);

/// Indices of the k largest scores, ties to the lower index, sorted ascending.
Index top_k_indices(std::span<const float> scores, std::size_t k);
Index top_k_indices(const Tensor& scores, std::size_t k);

// ---- reductions / losses --------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean binary cross-entropy of σ(logits) against constant targets in [0,1].
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);

// ---- resampling / misc ----------------------------------------------------

/// Bilinear resize of a 2-D map, half-pixel centres, edge clamp, no antialias.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Forward value `hard`, gradient routed unchanged into `soft`.
Tensor straight_through(const Tensor& soft, const Tensor& hard);

}  // namespace vitprune::ops
