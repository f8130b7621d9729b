#include "vitprune/routing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vitprune/errors.hpp"
#include "vitprune/pruning.hpp"

namespace vitprune {

std::size_t route_min_start() { return 2; }
std::size_t route_max_start(std::size_t depth) { return depth / 2; }
std::size_t route_max_end(std::size_t depth) { return depth - 2; }

RouteSpec sample_bounds(std::size_t depth, RouteMode mode, Rng& rng) {
  if (depth < 5) throw ValueError("sample_route: depth " + std::to_string(depth) + " < 5 leaves no valid bounds");
  RouteSpec r;
  if (mode == RouteMode::Fixed) {
    r.l = route_min_start();
    r.n = route_max_end(depth);
  } else {
    r.l = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(route_min_start()),
                                                   static_cast<std::int64_t>(route_max_start(depth))));
    r.n = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(r.l), static_cast<std::int64_t>(route_max_end(depth))));
  }
  return r;
}

void sample_tokens(RouteSpec& route, std::size_t tokens, double route_fraction, Rng& rng) {
  if (!(route_fraction >= 0.0 && route_fraction < 1.0)) {
    throw ValueError("sample_route: route_fraction must lie in [0, 1)");
  }
  const auto count = static_cast<std::size_t>(std::floor(route_fraction * static_cast<double>(tokens)));
  route.routed = rng.sample_without_replacement(tokens, count);
  std::sort(route.routed.begin(), route.routed.end());
  std::vector<char> is_routed(tokens, 0);
  for (std::size_t i : route.routed) is_routed[i] = 1;
  route.kept.clear();
  for (std::size_t i = 0; i < tokens; ++i)
    if (!is_routed[i]) route.kept.push_back(i);
}

RouteSpec sample_route(std::size_t depth, std::size_t tokens, double route_fraction, RouteMode mode, Rng& rng) {
  RouteSpec r = sample_bounds(depth, mode, rng);
  sample_tokens(r, tokens, route_fraction, rng);
  return r;
}

TokenState routed_span_forward(const TokenState& state, const RouteSpec& route, const Backbone& backbone,
                               const SpanHooks& hooks, bool mask_in_route, ExecutionMode mode) {
  if (mode != ExecutionMode::Train) throw ValueError("routing is a training-only path");
  const std::size_t depth = backbone.blocks.size();
  if (route.l > route.n || route.n >= depth) {
    throw ValueError("routed_span_forward: bounds [" + std::to_string(route.l) + ", " + std::to_string(route.n) +
                     "] outside [0, " + std::to_string(depth) + ")");
  }
  if (state.next_block != route.l) throw ValueError("routed_span_forward: state is not at the route start");
  if (route.kept.size() + route.routed.size() != state.size()) throw ValueError("routed_span_forward: token split mismatch");

  const Tensor& base = state.tokens;
  const std::size_t heads = backbone.config.heads;
  Tensor kept = ops::gather_rows(base, route.kept);
  const SpanHooks::FullRepr full = [&]() { return ops::scatter_rows(kept, route.kept, base); };

  for (std::size_t b = route.l; b <= route.n; ++b) {
    const Tensor* policy = hooks.policy_for_block ? hooks.policy_for_block(b, full) : nullptr;
    Tensor mask;
    if (policy && mask_in_route) {
      const Tensor sub = ops::reshape(ops::gather_rows(ops::reshape(*policy, {state.size(), 1}), route.kept),
                                      {route.kept.size()});
      mask = policy_to_mask(sub);
    }
    kept = block_apply(kept, mask.defined() ? &mask : nullptr, backbone.blocks[b], heads);
    if (hooks.after_block) hooks.after_block(b, full);
  }

  TokenState out = state;
  out.tokens = ops::scatter_rows(kept, route.kept, base);
  out.next_block = route.n + 1;
  for (std::size_t i : route.kept) out.stale_since[i] = out.next_block;
  return out;
}

}  // namespace vitprune
