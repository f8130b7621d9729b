#pragma once

#include <cstddef>
#include <functional>

#include "vitprune/backbone.hpp"
#include "vitprune/ops.hpp"
#include "vitprune/rng.hpp"

namespace vitprune {

enum class RouteMode { Random, Fixed };

enum class ExecutionMode { Train, Infer };

/// One train-time route: blocks [l, n] run on `kept` only, `routed` skips them.
struct RouteSpec {
  std::size_t l = 0;
  std::size_t n = 0;
  ops::Index kept;    // ascending
  ops::Index routed;  // ascending complement of `kept`

  bool empty() const { return routed.empty(); }
  bool covers(std::size_t block) const { return block >= l && block <= n; }
};

/// Routing-bound supports for depth L: l ∈ {2..⌊L/2⌋}, n ∈ {l..L−2}.
std::size_t route_min_start();
std::size_t route_max_start(std::size_t depth);
std::size_t route_max_end(std::size_t depth);

/// Draws (l, n) and the bounds. Fixed mode pins l = 2, n = L−2; random mode
/// draws l then n uniformly. |routed| = ⌊route_fraction·N⌋, drawn without
/// replacement.
RouteSpec sample_bounds(std::size_t depth, RouteMode mode, Rng& rng);
void sample_tokens(RouteSpec& route, std::size_t tokens, double route_fraction, Rng& rng);
RouteSpec sample_route(std::size_t depth, std::size_t tokens, double route_fraction, RouteMode mode, Rng& rng);

/// Hooks fired inside a routed span. `full` lazily builds the full N-row
/// representation with fresh kept rows scattered over the stale rows.
struct SpanHooks {
  using FullRepr = std::function<Tensor()>;
  // Before block b: returns the [N] policy that masks block b, or null.
  std::function<const Tensor*(std::size_t block, const FullRepr& full)> policy_for_block;
  // After block b.
  std::function<void(std::size_t block, const FullRepr& full)> after_block;
};

/// Runs blocks route.l..route.n on the kept rows and scatters the result over
/// the block-l representation. Pruning policies returned by the hook are
/// restricted to the kept subset when `mask_in_route` is set. Routing exists
/// only in training; ExecutionMode::Infer is rejected.
TokenState routed_span_forward(const TokenState& state, const RouteSpec& route, const Backbone& backbone,
                               const SpanHooks& hooks, bool mask_in_route, ExecutionMode mode = ExecutionMode::Train);

}  // namespace vitprune
