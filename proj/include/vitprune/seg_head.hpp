#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vitprune/backbone.hpp"
#include "vitprune/params.hpp"
#include "vitprune/tensor.hpp"

namespace vitprune {

/// LayerNorm then a per-token linear D→1.
struct SegHeadWeights {
  Tensor norm_gamma, norm_beta;
  Tensor weight;  // [D × 1]
  Tensor bias;    // [1]

  static SegHeadWeights init(std::size_t dim, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// [N] token logits in raster patch order.
Tensor head_token_logits(const Tensor& tokens, const SegHeadWeights& w);
/// Token logits on the patch grid, bilinearly upsampled to [H × W].
Tensor head_forward(const Tensor& tokens, const SegHeadWeights& w, const BackboneConfig& config);
Tensor upsample_token_logits(const Tensor& token_logits, const BackboneConfig& config);

/// Mean BCE(σ(logits), gt) + (1 − soft Dice), soft Dice = (2Σpg + ε)/(Σp + Σg + ε).
Tensor seg_loss(const Tensor& logits, const Tensor& gt, float eps = 1.0f);

/// 2|P∩G| / (|P| + |G|), 1 when both are empty.
double dice(std::span<const float> pred_mask, std::span<const float> gt);

/// Step-wise area under the precision-recall curve, thresholds at every
/// distinct score (ties form one step). 0 when gt has no positives.
double average_precision(std::span<const float> scores, std::span<const float> gt);

/// Pools pixels from many images, then scores them once.
class ApAccumulator {
 public:
  void add(std::span<const float> scores, std::span<const float> gt);
  double value() const;
  std::size_t size() const { return scores_.size(); }

 private:
  std::vector<float> scores_;
  std::vector<float> gt_;
};

struct DiceAccumulator {
  double intersection = 0.0;
  double pred = 0.0;
  double truth = 0.0;
  void add(std::span<const float> pred_mask, std::span<const float> gt);
  double value() const;
};

struct EvalReport {
  double dice = 0.0;
  double ap = 0.0;
  std::vector<std::pair<std::size_t, double>> per_block;  // (block, AP)
};

}  // namespace vitprune
