#include "vitprune/backbone.hpp"

#include <numeric>
#include <string>

#include "vitprune/errors.hpp"

namespace vitprune {

Tensor init_normal(Shape shape, float stddev, Rng& rng) {
  Tensor t(std::move(shape), true);
  for (auto& v : t.data_mut()) {
    // Truncated at two standard deviations.
    float z;
    do {
      z = rng.normal();
    } while (z < -2.0f || z > 2.0f);
    v = z * stddev;
  }
  return t;
}

void BackboneConfig::validate() const {
  if (image_h == 0 || image_w == 0 || patch_h == 0 || patch_w == 0) throw ConfigError("backbone: zero extent");
  if (image_h % patch_h != 0 || image_w % patch_w != 0) {
    throw ConfigError("backbone: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " not divisible by patch " + std::to_string(patch_h) + "x" + std::to_string(patch_w));
  }
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("backbone: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  if (depth == 0) throw ConfigError("backbone: depth must be positive");
  if (mlp_hidden() == 0) throw ConfigError("backbone: mlp_ratio yields zero hidden width");
}

Backbone Backbone::init(const BackboneConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.dim, hidden = config.mlp_hidden();
  constexpr float kStd = 0.02f;
  Backbone bb;
  bb.config = config;
  bb.embed.weight = init_normal({config.patch_features(), d}, kStd, rng);
  bb.embed.bias = Tensor({d}, true);
  bb.embed.pos = init_normal({config.tokens(), d}, kStd, rng);
  for (std::size_t b = 0; b < config.depth; ++b) {
    BlockWeights w;
    w.ln1_gamma = Tensor::full({d}, 1.0f, true);
    w.ln1_beta = Tensor({d}, true);
    w.qkv_weight = init_normal({d, 3 * d}, kStd, rng);
    w.qkv_bias = Tensor({3 * d}, true);
    w.proj_weight = init_normal({d, d}, kStd, rng);
    w.proj_bias = Tensor({d}, true);
    w.ls1 = Tensor::full({d}, config.layer_scale_init, true);
    w.ln2_gamma = Tensor::full({d}, 1.0f, true);
    w.ln2_beta = Tensor({d}, true);
    w.fc1_weight = init_normal({d, hidden}, kStd, rng);
    w.fc1_bias = Tensor({hidden}, true);
    w.fc2_weight = init_normal({hidden, d}, kStd, rng);
    w.fc2_bias = Tensor({d}, true);
    w.ls2 = Tensor::full({d}, config.layer_scale_init, true);
    bb.blocks.push_back(std::move(w));
  }
  return bb;
}

void Backbone::collect(ParamList& out) const {
  auto add = [&](std::string name, const Tensor& t, std::size_t layer, bool decay) {
    out.push_back({std::move(name), t, ParamGroup::Backbone, layer, decay});
  };
  add("embed.weight", embed.weight, 0, true);
  add("embed.bias", embed.bias, 0, false);
  add("embed.pos", embed.pos, 0, false);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& w = blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    const std::size_t layer = b + 1;
    add(p + "ln1.gamma", w.ln1_gamma, layer, false);
    add(p + "ln1.beta", w.ln1_beta, layer, false);
    add(p + "attn.qkv.weight", w.qkv_weight, layer, true);
    add(p + "attn.qkv.bias", w.qkv_bias, layer, false);
    add(p + "attn.proj.weight", w.proj_weight, layer, true);
    add(p + "attn.proj.bias", w.proj_bias, layer, false);
    add(p + "ls1", w.ls1, layer, false);
    add(p + "ln2.gamma", w.ln2_gamma, layer, false);
    add(p + "ln2.beta", w.ln2_beta, layer, false);
    add(p + "mlp.fc1.weight", w.fc1_weight, layer, true);
    add(p + "mlp.fc1.bias", w.fc1_bias, layer, false);
    add(p + "mlp.fc2.weight", w.fc2_weight, layer, true);
    add(p + "mlp.fc2.bias", w.fc2_bias, layer, false);
    add(p + "ls2", w.ls2, layer, false);
  }
}

TokenState TokenState::dense(Tensor tokens) {
  TokenState s;
  const std::size_t n = tokens.dim(0);
  s.tokens = std::move(tokens);
  s.active_idx.resize(n);
  std::iota(s.active_idx.begin(), s.active_idx.end(), std::size_t{0});
  s.stale_since.assign(n, 0);
  return s;
}

Tensor patchify(const Tensor& image, const BackboneConfig& config) {
  if (image.shape() != Shape{3, config.image_h, config.image_w}) {
    throw ShapeError("patchify: image " + shape_str(image.shape()) + ", expected [3x" + std::to_string(config.image_h) +
                     "x" + std::to_string(config.image_w) + "]");
  }
  const std::size_t gh = config.grid_h(), gw = config.grid_w(), ph = config.patch_h, pw = config.patch_w;
  const std::size_t h = config.image_h, w = config.image_w, f = config.patch_features();
  std::vector<float> rows(gh * gw * f);
  const auto px = image.data();
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      float* row = rows.data() + (gy * gw + gx) * f;
      std::size_t k = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x) row[k++] = px[(c * h + gy * ph + y) * w + gx * pw + x];
    }
  }
  return Tensor({gh * gw, f}, std::move(rows));
}

Tensor patch_embed(const Tensor& image, const PatchEmbedWeights& weights, const BackboneConfig& config) {
  const Tensor rows = patchify(image, config);
  return ops::add(ops::linear(rows, weights.weight, &weights.bias), weights.pos);
}

Tensor mhsa(const Tensor& x, const Tensor* mask, const BlockWeights& w, std::size_t heads,
            std::span<const float> col_bias) {
  const Tensor qkv = ops::linear(x, w.qkv_weight, &w.qkv_bias);
  const Tensor ctx = ops::multi_head_attention(qkv, heads, mask, col_bias);
  return ops::linear(ctx, w.proj_weight, &w.proj_bias);
}

Tensor mlp(const Tensor& x, const BlockWeights& w) {
  return ops::linear(ops::gelu(ops::linear(x, w.fc1_weight, &w.fc1_bias)), w.fc2_weight, &w.fc2_bias);
}

Tensor block_apply(const Tensor& x, const Tensor* mask, const BlockWeights& w, std::size_t heads) {
  if (mask && mask->shape() != Shape{x.dim(0), x.dim(0)}) {
    throw ShapeError("block: mask " + shape_str(mask->shape()) + " for " + std::to_string(x.dim(0)) + " active tokens");
  }
  const Tensor attn = mhsa(ops::layer_norm(x, w.ln1_gamma, w.ln1_beta), mask, w, heads);
  const Tensor z = ops::add(x, ops::mul_row(attn, w.ls1));
  const Tensor m = mlp(ops::layer_norm(z, w.ln2_gamma, w.ln2_beta), w);
  return ops::add(z, ops::mul_row(m, w.ls2));
}

TokenState block_forward(const TokenState& state, const Tensor* mask, const BlockWeights& w, std::size_t heads) {
  const std::size_t n = state.size();
  bool all_active = state.active_idx.size() == n;
  for (std::size_t i = 0; all_active && i < n; ++i) all_active = state.active_idx[i] == i;
  TokenState out = state;
  if (all_active) {
    out.tokens = block_apply(state.tokens, mask, w, heads);
  } else {
    const Tensor active = ops::gather_rows(state.tokens, state.active_idx);
    out.tokens = ops::scatter_rows(block_apply(active, mask, w, heads), state.active_idx, state.tokens);
  }
  out.next_block = state.next_block + 1;
  for (std::size_t i : state.active_idx) out.stale_since[i] = out.next_block;
  return out;
}

}  // namespace vitprune
