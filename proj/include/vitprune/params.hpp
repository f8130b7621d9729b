#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vitprune/rng.hpp"
#include "vitprune/tensor.hpp"

namespace vitprune {

/// Optimiser grouping for a parameter.
enum class ParamGroup { Head, Backbone };

struct ParamRef {
  std::string name;
  Tensor tensor;
  ParamGroup group = ParamGroup::Backbone;
  // Depth id for layer-wise lr decay: 0 = embedding, b + 1 = block b.
  std::size_t layer = 0;
  bool decay = true;  // receives weight decay
};

using ParamList = std::vector<ParamRef>;

Tensor init_normal(Shape shape, float stddev, Rng& rng);

}  // namespace vitprune
