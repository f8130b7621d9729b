#include "vitprune/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vitprune/errors.hpp"

namespace vitprune {

namespace {

double poly(std::size_t step, std::size_t start, std::size_t total, double power) {
  if (total <= start) return 0.0;
  const double progress = static_cast<double>(step - start) / static_cast<double>(total - start);
  return std::pow(std::max(0.0, 1.0 - progress), power);
}

void check_same(const ParamRef& a, const ParamRef& b) {
  if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) {
    throw ShapeError("parameter mismatch: " + a.name + " vs " + b.name);
  }
}

}  // namespace

double LrSchedule::factor(ParamGroup group, std::size_t step) const {
  if (group == ParamGroup::Head) {
    if (step < warmup_head) return static_cast<double>(step) / static_cast<double>(warmup_head);
    return poly(step, warmup_head, total_steps, poly_power);
  }
  if (step < warmup_head) return 0.0;
  const std::size_t end = warmup_head + warmup_backbone;
  if (step < end) return static_cast<double>(step - warmup_head) / static_cast<double>(warmup_backbone);
  return poly(step, end, total_steps, poly_power);
}

AdamW::AdamW(ParamList params, AdamWOptions options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0f);
    v_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

double AdamW::param_lr(const ParamRef& p, double schedule_factor) const {
  double lr = opt_.lr * schedule_factor;
  if (p.group == ParamGroup::Backbone && opt_.llrd != 1.0) {
    const std::size_t layer = std::min(p.layer, opt_.depth);
    lr *= std::pow(opt_.llrd, static_cast<double>(opt_.depth - layer));
  }
  return lr;
}

void AdamW::step(const LrSchedule& schedule) {
  const std::size_t step_index = t_++;
  const double b1 = opt_.beta1, b2 = opt_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ParamRef& p = params_[k];
    if (!p.tensor.has_grad()) continue;
    const double lr = param_lr(p, schedule.factor(p.group, step_index));
    const auto g = p.tensor.grad();
    auto w = p.tensor.data_mut();
    auto& m = m_[k];
    auto& v = v_[k];
    const double decay = p.decay ? lr * opt_.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      double wi = w[i];
      wi -= decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Ema::Ema(const ParamList& params, double decay) : decay_(decay) {
  for (const auto& p : params) shadow_.push_back(p.tensor.to_vector());
}

void Ema::update(const ParamList& params) {
  if (params.size() != shadow_.size()) throw ShapeError("ema: parameter count changed");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto w = params[k].tensor.data();
    auto& s = shadow_[k];
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = static_cast<float>(decay_ * s[i] + (1.0 - decay_) * w[i]);
    }
  }
}

void Ema::copy_to(const ParamList& target) const {
  if (target.size() != shadow_.size()) throw ShapeError("ema: parameter count mismatch");
  for (std::size_t k = 0; k < target.size(); ++k) {
    auto w = target[k].tensor.data_mut();
    if (w.size() != shadow_[k].size()) throw ShapeError("ema: size mismatch for " + target[k].name);
    std::copy(shadow_[k].begin(), shadow_[k].end(), w.begin());
  }
}

void copy_params(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw ShapeError("copy_params: parameter count mismatch");
  for (std::size_t k = 0; k < from.size(); ++k) {
    check_same(from[k], to[k]);
    const auto src = from[k].tensor.data();
    auto dst = to[k].tensor.data_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace vitprune
