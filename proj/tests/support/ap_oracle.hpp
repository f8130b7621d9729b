#pragma once

#include <algorithm>
#include <functional>
#include <span>
#include <vector>

namespace vitprune::testing {

// Precision/recall at every distinct threshold, counted from scratch over all
// pixels, then the step-wise area Σ (R_k − R_{k−1}) P_k in long double.
inline double brute_force_ap(std::span<const float> scores, std::span<const float> gt) {
  std::vector<float> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  long double positives = 0;
  for (float g : gt) positives += g > 0.5f;
  if (positives == 0) return 0.0;
  long double ap = 0, prev_recall = 0;
  for (float t : thresholds) {
    long double tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] < t) continue;
      (gt[i] > 0.5f ? tp : fp) += 1;
    }
    const long double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return static_cast<double>(ap);
}

}  // namespace vitprune::testing
