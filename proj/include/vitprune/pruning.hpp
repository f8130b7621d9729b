#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitprune/ops.hpp"
#include "vitprune/params.hpp"
#include "vitprune/rng.hpp"
#include "vitprune/tensor.hpp"

namespace vitprune {

/// Hierarchical keep-ratio schedule over blocks [first_block, depth).
///
/// Stage s covers `stage_len` consecutive blocks and keeps base_ratio^(s+1)
/// of the tokens. A constant schedule uses the same ratio for every stage.
struct PruneSchedule {
  std::size_t depth = 12;
  std::size_t first_block = 3;
  std::size_t stage_len = 3;
  double base_ratio = 0.7;
  std::vector<double> per_block_ratio;  // index b - first_block

  static PruneSchedule hierarchical(std::size_t depth, double base_ratio, std::size_t first_block = 3,
                                    std::size_t stage_len = 3);
  static PruneSchedule constant(std::size_t depth, double ratio, std::size_t first_block = 3,
                                std::size_t stage_len = 3);

  std::size_t num_stages() const;
  bool is_pruned(std::size_t block) const { return block >= first_block && block < depth; }
  bool is_stage_start(std::size_t block) const {
    return is_pruned(block) && (block - first_block) % stage_len == 0;
  }
  std::size_t stage_of(std::size_t block) const { return (block - first_block) / stage_len; }
  double block_ratio(std::size_t block) const;
  double stage_ratio(std::size_t stage) const;
  /// Per-stage token budgets for a sequence of n tokens.
  std::vector<std::size_t> stage_keep_counts(std::size_t n) const;

  void validate() const;
};

/// k = round(ratio·n), halves rounded away from zero.
std::size_t keep_count(double ratio, std::size_t n);

/// rms_norm → linear(D→D/2) → GELU → linear(D/2→1) → × learned scalar.
struct PredictorWeights {
  Tensor norm_gain;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
  Tensor out_scale;  // [1]

  static PredictorWeights init(std::size_t dim, float scale_init, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Per-token keep logits p_τ, shape [N].
Tensor predict_policy(const Tensor& tokens, const PredictorWeights& w);

struct PolicyOutput {
  Tensor logits;  // [N]
  Tensor hard;    // [N] in {0,1}; gradient flows to `soft`
  Tensor soft;    // [N] keep probability
  std::size_t stage = 0;
};

/// Two-class straight-through Gumbel-Softmax with (keep = p, drop = 0) logits.
/// hard = 1 where soft ≥ 0.5, so an exact tie keeps the token.
PolicyOutput gumbel_st(const Tensor& logits, float temperature, Rng& rng);
/// Same, with explicit Gumbel draws for the keep and drop classes.
PolicyOutput gumbel_st(const Tensor& logits, float temperature, std::span<const float> keep_noise,
                       std::span<const float> drop_noise);

/// M_ij = 1 on the diagonal, P_j elsewhere. Differentiable in P.
Tensor policy_to_mask(const Tensor& policy);

/// (1/(B·S)) Σ_b Σ_s (ρ_s − mean_τ P^{b,s})²; `policies[b][s]` is a [N] policy.
Tensor ratio_loss(const std::vector<std::vector<Tensor>>& policies, const PruneSchedule& schedule);

/// λ · (1/B) Σ_b Σ_s BCE(σ(p^{b,s}), T^b), BCE averaged over tokens.
Tensor informed_policy_loss(const std::vector<std::vector<Tensor>>& logits, const std::vector<Tensor>& targets,
                            float lambda_pol);

/// Bilinearly downsampled binary mask on the patch grid, flattened raster order.
Tensor make_target(const Tensor& gt_mask, std::size_t grid_h, std::size_t grid_w);

/// Top-k over logits with k = keep_count(ratio, N); k = 0 is clamped to 1
/// with a warning.
ops::Index select_inference_policy(const Tensor& logits, double ratio);

}  // namespace vitprune
