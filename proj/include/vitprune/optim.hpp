#pragma once

#include <cstddef>
#include <vector>

#include "vitprune/params.hpp"

namespace vitprune {

/// Two-stage warmup then polynomial decay. The head group warms up over
/// `warmup_head` steps; the backbone stays at 0 until then and warms up over
/// the next `warmup_backbone` steps. Each group then decays as
/// (1 − progress)^power to 0 at `total_steps`.
struct LrSchedule {
  std::size_t warmup_head = 0;
  std::size_t warmup_backbone = 0;
  std::size_t total_steps = 1;
  double poly_power = 0.9;

  double factor(ParamGroup group, std::size_t step) const;
};

struct AdamWOptions {
  double lr = 2e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double llrd = 1.0;  // backbone lr × llrd^(depth − layer)
  std::size_t depth = 0;
};

/// AdamW with decoupled weight decay (applied only to ParamRef::decay).
class AdamW {
 public:
  AdamW(ParamList params, AdamWOptions options);

  /// Learning rate for one parameter at a schedule factor.
  double param_lr(const ParamRef& p, double schedule_factor) const;
  /// One update from the accumulated gradients; parameters without a
  /// gradient are skipped.
  void step(const LrSchedule& schedule);
  void zero_grad();

  std::size_t steps() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamWOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

/// Exponential moving average of parameter values.
class Ema {
 public:
  Ema(const ParamList& params, double decay);
  /// shadow = d·shadow + (1 − d)·current
  void update(const ParamList& params);
  /// Writes the averaged values into `target` (same names and shapes).
  void copy_to(const ParamList& target) const;
  const std::vector<std::vector<float>>& shadow() const { return shadow_; }

 private:
  double decay_;
  std::vector<std::vector<float>> shadow_;
};

/// Copies values between two lists with matching names and shapes.
void copy_params(const ParamList& from, const ParamList& to);

}  // namespace vitprune
