#pragma once

#include <cstddef>
#include <vector>

#include "vitprune/config.hpp"
#include "vitprune/data.hpp"
#include "vitprune/model.hpp"
#include "vitprune/seg_head.hpp"
#include "vitprune/tome.hpp"

namespace vitprune {

/// How a model runs at inference.
struct InferenceSettings {
  Mode mode = Mode::None;
  double keep_ratio = 1.0;
  double merge_ratio = 0.5;

  static InferenceSettings from_config(const RunConfig& config);
};

/// One no-grad inference pass over a normalised image.
ForwardOutput infer(const Model& model, const Tensor& image, const InferenceSettings& settings,
                    bool keep_block_outputs = false);

/// Dice and AP of the final head plus AP at every tap, pooled over all pixels
/// of `samples`.
EvalReport evaluate(const Model& model, const std::vector<const Sample*>& samples, const InferenceSettings& settings);

/// L×L matrix of token-mean cosine similarity between block outputs,
/// averaged over samples.
std::vector<std::vector<double>> similarity_matrix(const Model& model, const std::vector<const Sample*>& samples,
                                                   const InferenceSettings& settings);

/// Mean of sim(b, b+1) for b in [first_block, L−1).
double consecutive_similarity(const std::vector<std::vector<double>>& sim, std::size_t first_block);

struct PolicyFrequency {
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t blocks = 0;                // pruned blocks counted
  std::vector<std::size_t> counts;       // per token, blocks in which it was computed
  std::vector<std::size_t> block_active; // per pruned block, active token count

  std::vector<double> frequencies() const;
};

/// Per-token selection counts over the pruned blocks of one inference pass.
PolicyFrequency policy_frequency(const Model& model, const Tensor& image, const PruneSchedule& schedule);

}  // namespace vitprune
