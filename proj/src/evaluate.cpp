#include "vitprune/evaluate.hpp"

#include <cmath>

#include "vitprune/errors.hpp"

namespace vitprune {

InferenceSettings InferenceSettings::from_config(const RunConfig& config) {
  InferenceSettings s;
  s.mode = config.mode;
  s.keep_ratio = mode_prunes(config.mode) ? config.keep_ratio : 1.0;
  s.merge_ratio = config.merge_ratio;
  return s;
}

ForwardOutput infer(const Model& model, const Tensor& image, const InferenceSettings& settings,
                    bool keep_block_outputs) {
  NoGradGuard guard;
  if (mode_prunes(settings.mode)) {
    return pruned_forward_infer(model, image, model.config.schedule(settings.keep_ratio), keep_block_outputs);
  }
  if (mode_merges(settings.mode)) {
    const MergeScope scope = settings.mode == Mode::TomeMhsa ? MergeScope::Mhsa : MergeScope::MhsaMlp;
    return tome_forward(model, image, settings.merge_ratio, scope, keep_block_outputs);
  }
  return dense_forward(model, image, keep_block_outputs);
}

EvalReport evaluate(const Model& model, const std::vector<const Sample*>& samples, const InferenceSettings& settings) {
  if (samples.empty()) throw ValueError("evaluate: no samples");
  NoGradGuard guard;
  std::vector<ApAccumulator> ap(model.taps.size());
  DiceAccumulator dice_acc;
  for (const Sample* s : samples) {
    const ForwardOutput out = infer(model, normalize(s->image), settings);
    const std::vector<Tensor> logits = tap_logits(model, out);
    for (std::size_t i = 0; i < logits.size(); ++i) ap[i].add(logits[i].data(), s->mask.data());
    const auto fin = logits.back().data();
    std::vector<float> pred(fin.size());
    for (std::size_t i = 0; i < fin.size(); ++i) pred[i] = fin[i] >= 0.0f ? 1.0f : 0.0f;
    dice_acc.add(pred, s->mask.data());
  }
  EvalReport r;
  r.dice = dice_acc.value();
  for (std::size_t i = 0; i < ap.size(); ++i) r.per_block.emplace_back(model.taps[i], ap[i].value());
  r.ap = r.per_block.back().second;
  return r;
}

std::vector<std::vector<double>> similarity_matrix(const Model& model, const std::vector<const Sample*>& samples,
                                                   const InferenceSettings& settings) {
  if (samples.empty()) throw ValueError("similarity_matrix: no samples");
  const std::size_t depth = model.backbone.blocks.size();
  std::vector<std::vector<double>> sim(depth, std::vector<double>(depth, 0.0));
  for (const Sample* s : samples) {
    const ForwardOutput out = infer(model, normalize(s->image), settings, true);
    const std::size_t n = out.block_outputs[0].dim(0), d = out.block_outputs[0].dim(1);
    // Unit rows per block.
    std::vector<std::vector<double>> unit(depth, std::vector<double>(n * d));
    for (std::size_t b = 0; b < depth; ++b) {
      const auto v = out.block_outputs[b].data();
      for (std::size_t t = 0; t < n; ++t) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(v[t * d + j]) * v[t * d + j];
        const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
        for (std::size_t j = 0; j < d; ++j) unit[b][t * d + j] = v[t * d + j] * inv;
      }
    }
    for (std::size_t a = 0; a < depth; ++a) {
      for (std::size_t b = a; b < depth; ++b) {
        double total = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += unit[a][t * d + j] * unit[b][t * d + j];
          total += dot;
        }
        const double mean = a == b ? 1.0 : total / static_cast<double>(n);
        sim[a][b] += mean;
        if (a != b) sim[b][a] += mean;
      }
    }
  }
  for (auto& row : sim)
    for (auto& v : row) v /= static_cast<double>(samples.size());
  return sim;
}

double consecutive_similarity(const std::vector<std::vector<double>>& sim, std::size_t first_block) {
  const std::size_t depth = sim.size();
  if (first_block + 1 >= depth) throw ValueError("consecutive_similarity: no block pairs after first_block");
  double total = 0.0;
  for (std::size_t b = first_block; b + 1 < depth; ++b) total += sim[b][b + 1];
  return total / static_cast<double>(depth - 1 - first_block);
}

std::vector<double> PolicyFrequency::frequencies() const {
  std::vector<double> f(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i)
    f[i] = blocks ? static_cast<double>(counts[i]) / static_cast<double>(blocks) : 1.0;
  return f;
}

PolicyFrequency policy_frequency(const Model& model, const Tensor& image, const PruneSchedule& schedule) {
  NoGradGuard guard;
  const ForwardOutput out = pruned_forward_infer(model, image, schedule);
  PolicyFrequency pf;
  pf.grid_h = model.config.backbone.grid_h();
  pf.grid_w = model.config.backbone.grid_w();
  pf.counts.assign(pf.grid_h * pf.grid_w, 0);
  std::size_t b = schedule.first_block;
  for (const ops::Index& sel : out.selections) {
    const std::size_t end = std::min(schedule.depth, b + schedule.stage_len);
    for (; b < end; ++b) {
      for (std::size_t i : sel) ++pf.counts[i];
      pf.block_active.push_back(sel.size());
      ++pf.blocks;
    }
  }
  return pf;
}

}  // namespace vitprune
