#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "vitprune/backbone.hpp"
#include "vitprune/pruning.hpp"
#include "vitprune/routing.hpp"
#include "vitprune/seg_head.hpp"

namespace vitprune {

enum class Mode { None, Prune, PruneFixedRoute, PruneRandomRoute, TomeMhsa, TomeMhsaMlp };

std::string mode_name(Mode mode);
/// Accepts the names produced by mode_name; throws ConfigError otherwise.
Mode parse_mode(const std::string& name);
bool mode_prunes(Mode mode);
bool mode_routes(Mode mode);
bool mode_merges(Mode mode);

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t first_block = 3;
  std::size_t stage_len = 3;
  // Blocks whose outputs get a segmentation head. The last entry must be
  // depth − 1 and uses the main head; the rest get auxiliary heads.
  // Empty means the last five blocks.
  std::vector<std::size_t> taps;
  float predictor_scale_init = 0.1f;

  std::vector<std::size_t> effective_taps() const;
  PruneSchedule schedule(double base_ratio) const;
};

struct Model {
  ModelConfig config;
  Backbone backbone;
  std::vector<PredictorWeights> predictors;  // one per pruning stage
  SegHeadWeights head;
  std::vector<SegHeadWeights> aux_heads;  // one per tap except the last
  std::vector<std::size_t> taps;

  static Model init(const ModelConfig& config, Rng& rng);
  ParamList parameters() const;
  std::size_t num_stages() const { return predictors.size(); }
  const SegHeadWeights& head_for_tap(std::size_t tap_index) const;
};

/// Result of one forward pass over a single image.
struct ForwardOutput {
  TokenState state;                         // after the last block
  std::vector<Tensor> tap_tokens;           // full [N × D] at each model tap
  std::vector<Tensor> block_outputs;        // full [N × D] per block when requested
  std::vector<PolicyOutput> policies;       // train: one per stage
  std::vector<ops::Index> selections;       // infer: kept indices per stage
  std::vector<std::size_t> active_counts;   // rows computed per block
};

Tensor embed_tokens(const Model& model, const Tensor& image);

/// Plain forward over all tokens.
ForwardOutput dense_forward(const Model& model, const Tensor& image, bool keep_block_outputs = false);

/// Inference pruning: top-k per stage, the stage's blocks run on the gathered
/// rows, results scattered back after every block. Unselected rows keep
/// their last-written values and may be selected again by a later stage.
ForwardOutput pruned_forward_infer(const Model& model, const Tensor& image, const PruneSchedule& schedule,
                                   bool keep_block_outputs = false);

/// Turns stage logits into a policy; the default draws Gumbel noise from the
/// forward's Rng.
using PolicySampler = std::function<PolicyOutput(const Tensor& logits, std::size_t stage)>;

struct TrainForwardOptions {
  const RouteSpec* route = nullptr;
  bool mask_in_route = true;
  float temperature = 1.0f;
  PolicySampler sampler;
  bool keep_block_outputs = false;
};

/// Training pruning: every token stays resident, each stage's policy masks
/// attention for the stage's blocks. With a route, blocks l..n run on the
/// kept rows only.
ForwardOutput pruned_forward_train(const Model& model, const Tensor& image, const PruneSchedule& schedule, Rng& rng,
                                   const TrainForwardOptions& options = {});

/// Segmentation logits [H × W] for each tap of a forward output.
std::vector<Tensor> tap_logits(const Model& model, const ForwardOutput& out);

}  // namespace vitprune
