#include "vitprune/pruning.hpp"

#include <cmath>
#include <string>

#include "vitprune/errors.hpp"
#include "vitprune/log.hpp"

namespace vitprune {

PruneSchedule PruneSchedule::hierarchical(std::size_t depth, double base_ratio, std::size_t first_block,
                                          std::size_t stage_len) {
  PruneSchedule s;
  s.depth = depth;
  s.first_block = first_block;
  s.stage_len = stage_len;
  s.base_ratio = base_ratio;
  for (std::size_t b = first_block; b < depth; ++b) {
    s.per_block_ratio.push_back(std::pow(base_ratio, static_cast<double>(1 + (b - first_block) / stage_len)));
  }
  s.validate();
  return s;
}

PruneSchedule PruneSchedule::constant(std::size_t depth, double ratio, std::size_t first_block, std::size_t stage_len) {
  PruneSchedule s;
  s.depth = depth;
  s.first_block = first_block;
  s.stage_len = stage_len;
  s.base_ratio = ratio;
  s.per_block_ratio.assign(depth > first_block ? depth - first_block : 0, ratio);
  s.validate();
  return s;
}

void PruneSchedule::validate() const {
  if (stage_len == 0) throw ConfigError("schedule: stage_len must be positive");
  if (first_block > depth) throw ConfigError("schedule: first_block beyond depth");
  if (per_block_ratio.size() != depth - first_block) throw ConfigError("schedule: ratio list length mismatch");
  for (double r : per_block_ratio) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("schedule: keep ratio " + std::to_string(r) + " outside (0, 1]");
  }
}

std::size_t PruneSchedule::num_stages() const {
  const std::size_t span = depth - first_block;
  return (span + stage_len - 1) / stage_len;
}

double PruneSchedule::block_ratio(std::size_t block) const {
  if (!is_pruned(block)) return 1.0;
  return per_block_ratio[block - first_block];
}

double PruneSchedule::stage_ratio(std::size_t stage) const {
  if (stage >= num_stages()) throw IndexError("schedule: stage " + std::to_string(stage) + " out of range");
  return per_block_ratio[stage * stage_len];
}

std::vector<std::size_t> PruneSchedule::stage_keep_counts(std::size_t n) const {
  std::vector<std::size_t> counts;
  for (std::size_t s = 0; s < num_stages(); ++s) counts.push_back(keep_count(stage_ratio(s), n));
  return counts;
}

std::size_t keep_count(double ratio, std::size_t n) {
  // std::round rounds halves away from zero.
  return static_cast<std::size_t>(std::round(ratio * static_cast<double>(n)));
}

PredictorWeights PredictorWeights::init(std::size_t dim, float scale_init, Rng& rng) {
  const std::size_t hidden = std::max<std::size_t>(1, dim / 2);
  PredictorWeights w;
  w.norm_gain = Tensor::full({dim}, 1.0f, true);
  w.fc1_weight = init_normal({dim, hidden}, 0.02f, rng);
  w.fc1_bias = Tensor({hidden}, true);
  w.fc2_weight = init_normal({hidden, 1}, 0.02f, rng);
  w.fc2_bias = Tensor({1}, true);
  w.out_scale = Tensor::full({1}, scale_init, true);
  return w;
}

void PredictorWeights::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "norm.gain", norm_gain, ParamGroup::Head, 0, false});
  out.push_back({prefix + "fc1.weight", fc1_weight, ParamGroup::Head, 0, true});
  out.push_back({prefix + "fc1.bias", fc1_bias, ParamGroup::Head, 0, false});
  out.push_back({prefix + "fc2.weight", fc2_weight, ParamGroup::Head, 0, true});
  out.push_back({prefix + "fc2.bias", fc2_bias, ParamGroup::Head, 0, false});
  out.push_back({prefix + "out_scale", out_scale, ParamGroup::Head, 0, false});
}

Tensor predict_policy(const Tensor& tokens, const PredictorWeights& w) {
  if (tokens.ndim() != 2 || tokens.dim(1) != w.norm_gain.dim(0)) {
    throw ShapeError("predict_policy: tokens " + shape_str(tokens.shape()) + " for predictor width " +
                     std::to_string(w.norm_gain.dim(0)));
  }
  Tensor h = ops::rms_norm(tokens, w.norm_gain);
  h = ops::gelu(ops::linear(h, w.fc1_weight, &w.fc1_bias));
  h = ops::mul_row(ops::linear(h, w.fc2_weight, &w.fc2_bias), w.out_scale);
  return ops::reshape(h, {tokens.dim(0)});
}

PolicyOutput gumbel_st(const Tensor& logits, float temperature, std::span<const float> keep_noise,
                       std::span<const float> drop_noise) {
  if (!(temperature > 0.0f)) throw ValueError("gumbel_st: temperature must be positive");
  const std::size_t n = logits.numel();
  if (keep_noise.size() != n || drop_noise.size() != n) throw ShapeError("gumbel_st: noise size mismatch");
  // softmax over (p + g_keep, g_drop)/T, keep column = σ((p + g_keep − g_drop)/T)
  std::vector<float> offset(n);
  for (std::size_t i = 0; i < n; ++i) offset[i] = keep_noise[i] - drop_noise[i];
  const Tensor perturbed = ops::add(logits, Tensor(logits.shape(), std::move(offset)));
  PolicyOutput out;
  out.logits = logits;
  out.soft = ops::sigmoid(ops::scale(perturbed, 1.0f / temperature));
  std::vector<float> hard(n);
  const auto sv = out.soft.data();
  for (std::size_t i = 0; i < n; ++i) hard[i] = sv[i] >= 0.5f ? 1.0f : 0.0f;
  out.hard = ops::straight_through(out.soft, Tensor(logits.shape(), std::move(hard)));
  return out;
}

PolicyOutput gumbel_st(const Tensor& logits, float temperature, Rng& rng) {
  const std::size_t n = logits.numel();
  std::vector<float> keep(n), drop(n);
  for (std::size_t i = 0; i < n; ++i) {
    keep[i] = rng.gumbel();
    drop[i] = rng.gumbel();
  }
  return gumbel_st(logits, temperature, keep, drop);
}

Tensor policy_to_mask(const Tensor& policy) {
  if (policy.ndim() != 1) throw ShapeError("policy_to_mask: expected [N], got " + shape_str(policy.shape()));
  const std::size_t n = policy.dim(0);
  const auto p = policy.data();
  for (float v : p) {
    if (v != 0.0f && v != 1.0f) throw ValueError("policy_to_mask: policy must be binary");
  }
  std::vector<float> mask(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = i == j ? 1.0f : p[j];
  return detail::make_result({n, n}, std::move(mask), {&policy}, "policy_to_mask", [n](detail::Node& self) {
    detail::Node& pp = *self.parents[0];
    if (!pp.requires_grad) return;
    auto& g = pp.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) g[j] += self.grad[i * n + j];
  });
}

Tensor ratio_loss(const std::vector<std::vector<Tensor>>& policies, const PruneSchedule& schedule) {
  if (policies.empty()) throw ValueError("ratio_loss: empty batch");
  const std::size_t stages = policies.front().size();
  if (stages == 0) throw ValueError("ratio_loss: empty stage list");
  Tensor total;
  for (const auto& item : policies) {
    if (item.size() != stages) throw ShapeError("ratio_loss: stage count differs across the batch");
    for (std::size_t s = 0; s < stages; ++s) {
      const Tensor gap = ops::add_scalar(ops::mean(item[s]), -static_cast<float>(schedule.stage_ratio(s)));
      const Tensor sq = ops::mul(gap, gap);
      total = total.defined() ? ops::add(total, sq) : sq;
    }
  }
  return ops::scale(total, 1.0f / static_cast<float>(policies.size() * stages));
}

Tensor informed_policy_loss(const std::vector<std::vector<Tensor>>& logits, const std::vector<Tensor>& targets,
                            float lambda_pol) {
  if (logits.empty() || logits.size() != targets.size()) throw ValueError("informed_policy_loss: batch mismatch");
  Tensor total;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    if (logits[b].empty()) throw ValueError("informed_policy_loss: empty stage list");
    for (const Tensor& p : logits[b]) {
      const Tensor term = ops::bce_with_logits(p, targets[b]);
      total = total.defined() ? ops::add(total, term) : term;
    }
  }
  return ops::scale(total, lambda_pol / static_cast<float>(logits.size()));
}

Tensor make_target(const Tensor& gt_mask, std::size_t grid_h, std::size_t grid_w) {
  for (float v : gt_mask.data()) {
    if (v != 0.0f && v != 1.0f) throw ValueError("make_target: ground truth must be binary");
  }
  NoGradGuard guard;
  const Tensor small = ops::bilinear_resize(gt_mask, grid_h, grid_w);
  return ops::reshape(small, {grid_h * grid_w});
}

ops::Index select_inference_policy(const Tensor& logits, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValueError("select_inference_policy: ratio outside (0, 1]");
  const std::size_t n = logits.numel();
  std::size_t k = keep_count(ratio, n);
  if (k == 0) {
    warn("keep ratio " + std::to_string(ratio) + " rounds to zero tokens of " + std::to_string(n) + "; keeping 1");
    k = 1;
  }
  return ops::top_k_indices(logits, k);
}

}  // namespace vitprune
