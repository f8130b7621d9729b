#include "vitprune/seg_head.hpp"

#include <algorithm>
#include <numeric>

#include "vitprune/errors.hpp"
#include "vitprune/ops.hpp"

namespace vitprune {

SegHeadWeights SegHeadWeights::init(std::size_t dim, Rng& rng) {
  SegHeadWeights w;
  w.norm_gamma = Tensor::full({dim}, 1.0f, true);
  w.norm_beta = Tensor({dim}, true);
  w.weight = init_normal({dim, 1}, 0.02f, rng);
  w.bias = Tensor({1}, true);
  return w;
}

void SegHeadWeights::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "norm.gamma", norm_gamma, ParamGroup::Head, 0, false});
  out.push_back({prefix + "norm.beta", norm_beta, ParamGroup::Head, 0, false});
  out.push_back({prefix + "weight", weight, ParamGroup::Head, 0, true});
  out.push_back({prefix + "bias", bias, ParamGroup::Head, 0, false});
}

Tensor head_token_logits(const Tensor& tokens, const SegHeadWeights& w) {
  const Tensor h = ops::layer_norm(tokens, w.norm_gamma, w.norm_beta);
  return ops::reshape(ops::linear(h, w.weight, &w.bias), {tokens.dim(0)});
}

Tensor upsample_token_logits(const Tensor& token_logits, const BackboneConfig& config) {
  const Tensor grid = ops::reshape(token_logits, {config.grid_h(), config.grid_w()});
  return ops::bilinear_resize(grid, config.image_h, config.image_w);
}

Tensor head_forward(const Tensor& tokens, const SegHeadWeights& w, const BackboneConfig& config) {
  return upsample_token_logits(head_token_logits(tokens, w), config);
}

Tensor seg_loss(const Tensor& logits, const Tensor& gt, float eps) {
  if (logits.shape() != gt.shape()) {
    throw ShapeError("seg_loss: logits " + shape_str(logits.shape()) + " vs mask " + shape_str(gt.shape()));
  }
  const Tensor bce = ops::bce_with_logits(logits, gt);
  const Tensor prob = ops::sigmoid(logits);
  double gt_sum = 0.0;
  for (float v : gt.data()) gt_sum += v;
  const Tensor numer = ops::add_scalar(ops::scale(ops::sum(ops::mul(prob, gt)), 2.0f), eps);
  const Tensor denom = ops::add_scalar(ops::sum(prob), static_cast<float>(gt_sum) + eps);
  const Tensor soft_dice = ops::div(numer, denom);
  return ops::add(bce, ops::add_scalar(ops::scale(soft_dice, -1.0f), 1.0f));
}

double dice(std::span<const float> pred_mask, std::span<const float> gt) {
  DiceAccumulator acc;
  acc.add(pred_mask, gt);
  return acc.value();
}

void DiceAccumulator::add(std::span<const float> pred_mask, std::span<const float> gt) {
  if (pred_mask.size() != gt.size()) throw ShapeError("dice: size mismatch");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred_mask[i] > 0.5f, g = gt[i] > 0.5f;
    intersection += (p && g) ? 1.0 : 0.0;
    pred += p ? 1.0 : 0.0;
    truth += g ? 1.0 : 0.0;
  }
}

double DiceAccumulator::value() const {
  if (pred + truth == 0.0) return 1.0;
  return 2.0 * intersection / (pred + truth);
}

double average_precision(std::span<const float> scores, std::span<const float> gt) {
  if (scores.size() != gt.size()) throw ShapeError("average_precision: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double positives = 0.0;
  for (float g : gt) positives += g > 0.5f ? 1.0 : 0.0;
  if (positives == 0.0) return 0.0;

  double tp = 0.0, fp = 0.0, prev_recall = 0.0;
  double ap = 0.0, carry = 0.0;  // Kahan-compensated sum
  std::size_t i = 0;
  while (i < n) {
    const float s = scores[order[i]];
    while (i < n && scores[order[i]] == s) {
      if (gt[order[i]] > 0.5f) tp += 1.0;
      else fp += 1.0;
      ++i;
    }
    const double recall = tp / positives;
    const double precision = tp / (tp + fp);
    const double term = (recall - prev_recall) * precision - carry;
    const double next = ap + term;
    carry = (next - ap) - term;
    ap = next;
    prev_recall = recall;
  }
  return ap;
}

void ApAccumulator::add(std::span<const float> scores, std::span<const float> gt) {
  if (scores.size() != gt.size()) throw ShapeError("average_precision: size mismatch");
  scores_.insert(scores_.end(), scores.begin(), scores.end());
  gt_.insert(gt_.end(), gt.begin(), gt.end());
}

double ApAccumulator::value() const { return average_precision(scores_, gt_); }

}  // namespace vitprune
