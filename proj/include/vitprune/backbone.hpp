#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitprune/ops.hpp"
#include "vitprune/params.hpp"
#include "vitprune/rng.hpp"
#include "vitprune/tensor.hpp"

namespace vitprune {

struct BackboneConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t patch_h = 8;
  std::size_t patch_w = 8;
  std::size_t depth = 12;
  std::size_t dim = 64;
  std::size_t heads = 4;
  float mlp_ratio = 4.0f;
  float layer_scale_init = 1e-5f;

  std::size_t grid_h() const { return image_h / patch_h; }
  std::size_t grid_w() const { return image_w / patch_w; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(static_cast<float>(dim) * mlp_ratio); }
  std::size_t patch_features() const { return 3 * patch_h * patch_w; }

  /// Throws ConfigError on non-divisible extents or zero sizes.
  void validate() const;
};

struct PatchEmbedWeights {
  Tensor weight;  // [3·ph·pw × D]
  Tensor bias;    // [D]
  Tensor pos;     // [N × D], learned
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_weight, qkv_bias;  // [D × 3D], [3D]
  Tensor proj_weight, proj_bias;
  Tensor ls1;  // per-channel layer scale on the attention branch
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
  Tensor ls2;
};

struct Backbone {
  BackboneConfig config;
  PatchEmbedWeights embed;
  std::vector<BlockWeights> blocks;

  static Backbone init(const BackboneConfig& config, Rng& rng);
  void collect(ParamList& out) const;
};

/// Tokens being processed plus pruning bookkeeping.
///
/// `stale_since[i]` is the index of the block whose input the token's current
/// value is: a token last written by block b carries b + 1. Untouched tokens
/// keep their earlier value, so stale_since[i] never exceeds `next_block`.
struct TokenState {
  Tensor tokens;  // [N × D]
  ops::Index active_idx;
  std::vector<std::size_t> stale_since;
  std::size_t next_block = 0;

  static TokenState dense(Tensor tokens);
  std::size_t size() const { return tokens.dim(0); }
};

/// [3×H×W] image to [N × 3·ph·pw] patch rows in raster patch order, each row
/// flattened channel-major (c, y, x).
Tensor patchify(const Tensor& image, const BackboneConfig& config);

Tensor patch_embed(const Tensor& image, const PatchEmbedWeights& weights, const BackboneConfig& config);

/// Multi-head self-attention on already-normalised rows, output projection
/// included. `mask` is [N_a × N_a] or null; `col_bias` adds to every logit
/// column (proportional attention).
Tensor mhsa(const Tensor& x, const Tensor* mask, const BlockWeights& w, std::size_t heads,
            std::span<const float> col_bias = {});

Tensor mlp(const Tensor& x, const BlockWeights& w);

/// One pre-norm block on a row set: x + ls1·MHSA(LN(x)), then + ls2·MLP(LN(·)).
Tensor block_apply(const Tensor& x, const Tensor* mask, const BlockWeights& w, std::size_t heads);

/// Applies block `w` to the active rows of `state`. Rows outside the active
/// set are carried through untouched; a mask, when given, covers the active
/// rows only.
TokenState block_forward(const TokenState& state, const Tensor* mask, const BlockWeights& w, std::size_t heads);

}  // namespace vitprune
