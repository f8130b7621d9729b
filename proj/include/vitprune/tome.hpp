#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitprune/backbone.hpp"
#include "vitprune/model.hpp"
#include "vitprune/ops.hpp"

namespace vitprune {

enum class MergeScope { Mhsa, MhsaMlp };

/// Bipartite merge of N_a rows. Output rows keep the ascending order of the
/// surviving input rows; each merged source folds into its destination.
struct MergeMap {
  ops::Index src_idx;  // even positions
  ops::Index dst_idx;  // odd positions
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (src, dst), most similar first
  std::vector<std::vector<std::size_t>> groups;  // constituents of each output row
  std::vector<float> sizes;                      // multiplicity of each output row
  std::vector<float> input_sizes;                // multiplicity of each input row
  ops::Index assign;                             // input row -> output row
  std::size_t inputs = 0;

  std::size_t outputs() const { return groups.size(); }
};

/// Identity map over n rows.
MergeMap identity_merge(std::size_t n);

/// Splits rows by index parity, matches every source to its most
/// cosine-similar destination on `keys`, and merges the r best sources.
/// `input_sizes` (empty = all ones) weight the means.
MergeMap bipartite_soft_match(const Tensor& keys, std::size_t r, std::span<const float> input_sizes = {});

/// Multiplicity-weighted mean of each group.
Tensor merge(const Tensor& tokens, const MergeMap& map);
/// Copies every output row back to each of its constituents.
Tensor unmerge(const Tensor& merged, const MergeMap& map);
/// log(size) per output row, the proportional-attention column bias.
std::vector<float> size_bias(const MergeMap& map);

/// r = min(⌊ratio·N_a⌋, ⌊N_a/2⌋).
std::size_t merge_count(double ratio, std::size_t n);

/// Mean-over-heads attention keys of LN1(x), [N × d_k]; no gradient.
Tensor attention_keys(const Tensor& x, const BlockWeights& w, std::size_t heads);

Tensor tome_block_apply(const Tensor& x, std::size_t r, MergeScope scope, const BlockWeights& w, std::size_t heads);
TokenState tome_block_forward(const TokenState& state, std::size_t r, MergeScope scope, const BlockWeights& w,
                              std::size_t heads);

/// Every block merges ⌊ratio·N⌋ tokens (capped at N/2) and unmerges after
/// the scope.
ForwardOutput tome_forward(const Model& model, const Tensor& image, double merge_ratio, MergeScope scope,
                           bool keep_block_outputs = false);

}  // namespace vitprune
