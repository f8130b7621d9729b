#include "vitprune/tome.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vitprune/errors.hpp"

namespace vitprune {

MergeMap identity_merge(std::size_t n) {
  MergeMap m;
  m.inputs = n;
  for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? m.src_idx : m.dst_idx).push_back(i);
  m.groups.resize(n);
  m.assign.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.groups[i] = {i};
    m.assign[i] = i;
  }
  m.sizes.assign(n, 1.0f);
  m.input_sizes = m.sizes;
  return m;
}

MergeMap bipartite_soft_match(const Tensor& keys, std::size_t r, std::span<const float> input_sizes) {
  if (keys.ndim() != 2) throw ShapeError("bipartite_soft_match: keys must be 2-D");
  const std::size_t n = keys.dim(0), d = keys.dim(1);
  if (r > n / 2) throw ValueError("bipartite_soft_match: r=" + std::to_string(r) + " exceeds " + std::to_string(n / 2));
  if (!input_sizes.empty() && input_sizes.size() != n) throw ShapeError("bipartite_soft_match: sizes length mismatch");
  MergeMap m = identity_merge(n);
  if (!input_sizes.empty()) {
    m.sizes.assign(input_sizes.begin(), input_sizes.end());
    m.input_sizes = m.sizes;
  }
  if (r == 0) return m;

  const auto kv = keys.data();
  std::vector<float> unit(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(kv[i * d + j]) * kv[i * d + j];
    const float inv = ss > 0.0 ? static_cast<float>(1.0 / std::sqrt(ss)) : 0.0f;
    for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = kv[i * d + j] * inv;
  }

  struct Match {
    std::size_t src, dst;
    float score;
  };
  std::vector<Match> best;
  for (std::size_t s : m.src_idx) {
    Match mt{s, m.dst_idx.front(), -std::numeric_limits<float>::infinity()};
    for (std::size_t t : m.dst_idx) {
      float dot = 0.0f;
      for (std::size_t j = 0; j < d; ++j) dot += unit[s * d + j] * unit[t * d + j];
      if (dot > mt.score) mt = {s, t, dot};
    }
    best.push_back(mt);
  }
  std::stable_sort(best.begin(), best.end(), [](const Match& a, const Match& b) { return a.score > b.score; });

  std::vector<std::size_t> target(n);
  std::iota(target.begin(), target.end(), std::size_t{0});
  for (std::size_t i = 0; i < r; ++i) {
    m.pairs.emplace_back(best[i].src, best[i].dst);
    target[best[i].src] = best[i].dst;
  }
  const std::vector<float>& in_sizes = m.input_sizes;
  m.groups.clear();
  m.sizes.clear();
  std::vector<std::size_t> out_row(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (target[i] != i) continue;
    out_row[i] = m.groups.size();
    m.groups.push_back({i});
    m.sizes.push_back(in_sizes[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (target[i] == i) {
      m.assign[i] = out_row[i];
      continue;
    }
    const std::size_t row = out_row[target[i]];
    m.groups[row].push_back(i);
    m.sizes[row] += in_sizes[i];
    m.assign[i] = row;
  }
  for (auto& g : m.groups) std::sort(g.begin(), g.end());
  return m;
}

Tensor merge(const Tensor& tokens, const MergeMap& map) {
  if (tokens.dim(0) != map.inputs) throw ShapeError("merge: map built for " + std::to_string(map.inputs) + " rows");
  std::vector<ops::RowMix> mixes(map.outputs());
  for (std::size_t r = 0; r < map.outputs(); ++r) {
    const auto& g = map.groups[r];
    mixes[r].rows = g;
    if (g.size() == 1) {
      mixes[r].weights = {1.0f};
      continue;
    }
    std::vector<float> w;
    for (std::size_t i : g) w.push_back(map.input_sizes[i] / map.sizes[r]);
    mixes[r].weights = std::move(w);
  }
  return ops::combine_rows(tokens, mixes);
}

Tensor unmerge(const Tensor& merged, const MergeMap& map) {
  if (merged.dim(0) != map.outputs()) throw ShapeError("unmerge: expected " + std::to_string(map.outputs()) + " rows");
  bool identity = map.outputs() == map.inputs;
  for (std::size_t i = 0; identity && i < map.inputs; ++i) identity = map.assign[i] == i;
  if (identity) return merged;
  std::vector<ops::RowMix> mixes(map.inputs);
  for (std::size_t i = 0; i < map.inputs; ++i) mixes[i] = {{map.assign[i]}, {1.0f}};
  return ops::combine_rows(merged, mixes);
}

std::vector<float> size_bias(const MergeMap& map) {
  std::vector<float> bias(map.outputs());
  for (std::size_t r = 0; r < map.outputs(); ++r) bias[r] = std::log(map.sizes[r]);
  return bias;
}

std::size_t merge_count(double ratio, std::size_t n) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValueError("merge ratio outside [0, 1]");
  const auto r = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  return std::min(r, n / 2);
}

Tensor attention_keys(const Tensor& x, const BlockWeights& w, std::size_t heads) {
  NoGradGuard guard;
  const std::size_t d = x.dim(1);
  const Tensor xn = ops::layer_norm(x, w.ln1_gamma, w.ln1_beta);
  const Tensor wk = ops::slice_cols(w.qkv_weight, d, d);
  const Tensor bk = ops::reshape(ops::slice_cols(ops::reshape(w.qkv_bias, {1, 3 * d}), d, d), {d});
  const Tensor k = ops::linear(xn, wk, &bk);
  const std::size_t n = x.dim(0), dk = d / heads;
  std::vector<float> avg(n * dk, 0.0f);
  const auto kv = k.data();
  const float inv = 1.0f / static_cast<float>(heads);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < dk; ++j) avg[i * dk + j] += kv[i * d + h * dk + j] * inv;
  return Tensor({n, dk}, std::move(avg));
}

Tensor tome_block_apply(const Tensor& x, std::size_t r, MergeScope scope, const BlockWeights& w, std::size_t heads) {
  if (r == 0) return block_apply(x, nullptr, w, heads);
  const MergeMap map = bipartite_soft_match(attention_keys(x, w, heads), r);
  const std::vector<float> bias = size_bias(map);
  if (scope == MergeScope::Mhsa) {
    const Tensor xn = merge(ops::layer_norm(x, w.ln1_gamma, w.ln1_beta), map);
    const Tensor attn = unmerge(mhsa(xn, nullptr, w, heads, bias), map);
    const Tensor z = ops::add(x, ops::mul_row(attn, w.ls1));
    const Tensor m = mlp(ops::layer_norm(z, w.ln2_gamma, w.ln2_beta), w);
    return ops::add(z, ops::mul_row(m, w.ls2));
  }
  const Tensor xm = merge(x, map);
  const Tensor attn = mhsa(ops::layer_norm(xm, w.ln1_gamma, w.ln1_beta), nullptr, w, heads, bias);
  const Tensor branch1 = ops::mul_row(attn, w.ls1);
  const Tensor zm = ops::add(xm, branch1);
  const Tensor branch2 = ops::mul_row(mlp(ops::layer_norm(zm, w.ln2_gamma, w.ln2_beta), w), w.ls2);
  return ops::add(x, unmerge(ops::add(branch1, branch2), map));
}

TokenState tome_block_forward(const TokenState& state, std::size_t r, MergeScope scope, const BlockWeights& w,
                              std::size_t heads) {
  TokenState out = state;
  out.tokens = tome_block_apply(state.tokens, r, scope, w, heads);
  out.next_block = state.next_block + 1;
  for (std::size_t i : state.active_idx) out.stale_since[i] = out.next_block;
  return out;
}

ForwardOutput tome_forward(const Model& model, const Tensor& image, double merge_ratio, MergeScope scope,
                           bool keep_block_outputs) {
  ForwardOutput out;
  TokenState state = TokenState::dense(embed_tokens(model, image));
  const std::size_t heads = model.config.backbone.heads;
  const std::size_t r = merge_count(merge_ratio, state.size());
  out.tap_tokens.resize(model.taps.size());
  for (std::size_t b = 0; b < model.backbone.blocks.size(); ++b) {
    state = tome_block_forward(state, r, scope, model.backbone.blocks[b], heads);
    out.active_counts.push_back(state.size() - r);
    if (keep_block_outputs) out.block_outputs.push_back(state.tokens);
    const auto it = std::find(model.taps.begin(), model.taps.end(), b);
    if (it != model.taps.end()) out.tap_tokens[static_cast<std::size_t>(it - model.taps.begin())] = state.tokens;
  }
  out.state = std::move(state);
  return out;
}

}  // namespace vitprune
