#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "vitprune/backbone.hpp"
#include "vitprune/ops.hpp"
#include "vitprune/pruning.hpp"
#include "vitprune/seg_head.hpp"

namespace vitprune::testing {

struct GradCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
};

inline Tensor binary_mask(std::size_t n, Rng& rng, bool requires_grad) {
  std::vector<float> m(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] = (i == j || rng.bernoulli(0.6)) ? 1.0f : 0.0f;
  return Tensor({n, n}, std::move(m), requires_grad);
}

inline BlockWeights random_block(std::size_t d, std::size_t hidden, Rng& rng) {
  auto r = [&](Shape s, float lo = -0.5f, float hi = 0.5f) { return random_tensor(std::move(s), rng, lo, hi); };
  BlockWeights w;
  w.ln1_gamma = r({d}, 0.5f, 1.5f);
  w.ln1_beta = r({d});
  w.qkv_weight = r({d, 3 * d});
  w.qkv_bias = r({3 * d});
  w.proj_weight = r({d, d});
  w.proj_bias = r({d});
  w.ls1 = r({d});
  w.ln2_gamma = r({d}, 0.5f, 1.5f);
  w.ln2_beta = r({d});
  w.fc1_weight = r({d, hidden});
  w.fc1_bias = r({hidden});
  w.fc2_weight = r({hidden, d});
  w.fc2_bias = r({d});
  w.ls2 = r({d});
  return w;
}

// Every differentiable kernel plus the composite layers built from them.
inline std::vector<GradCase> grad_cases() {
  using T = std::vector<Tensor>;
  std::vector<GradCase> c;
  auto rt = [](Shape s, Rng& rng, float lo = -2.0f, float hi = 2.0f) { return random_tensor(std::move(s), rng, lo, hi); };

  c.push_back({"matmul", [=](Rng& g) { return T{rt({5, 4}, g), rt({4, 3}, g)}; },
               [](const T& x) { return ops::matmul(x[0], x[1]); }});
  c.push_back({"linear", [=](Rng& g) { return T{rt({5, 4}, g), rt({4, 3}, g), rt({3}, g)}; },
               [](const T& x) { return ops::linear(x[0], x[1], &x[2]); }});
  c.push_back({"transpose", [=](Rng& g) { return T{rt({3, 5}, g)}; }, [](const T& x) { return ops::transpose(x[0]); }});
  c.push_back({"reshape", [=](Rng& g) { return T{rt({3, 4}, g)}; }, [](const T& x) { return ops::reshape(x[0], {2, 6}); }});
  c.push_back({"add", [=](Rng& g) { return T{rt({3, 4}, g), rt({3, 4}, g)}; }, [](const T& x) { return ops::add(x[0], x[1]); }});
  c.push_back({"sub", [=](Rng& g) { return T{rt({3, 4}, g), rt({3, 4}, g)}; }, [](const T& x) { return ops::sub(x[0], x[1]); }});
  c.push_back({"mul", [=](Rng& g) { return T{rt({3, 4}, g), rt({3, 4}, g)}; }, [](const T& x) { return ops::mul(x[0], x[1]); }});
  c.push_back({"div", [=](Rng& g) { return T{rt({3, 4}, g), rt({3, 4}, g, 0.5f, 2.0f)}; },
               [](const T& x) { return ops::div(x[0], x[1]); }});
  c.push_back({"scale", [=](Rng& g) { return T{rt({3, 4}, g)}; }, [](const T& x) { return ops::scale(x[0], -1.7f); }});
  c.push_back({"add_scalar", [=](Rng& g) { return T{rt({3, 4}, g)}; }, [](const T& x) { return ops::add_scalar(x[0], 0.3f); }});
  c.push_back({"add_row", [=](Rng& g) { return T{rt({3, 4}, g), rt({4}, g)}; }, [](const T& x) { return ops::add_row(x[0], x[1]); }});
  c.push_back({"mul_row", [=](Rng& g) { return T{rt({3, 4}, g), rt({4}, g)}; }, [](const T& x) { return ops::mul_row(x[0], x[1]); }});
  c.push_back({"gelu", [=](Rng& g) { return T{rt({4, 5}, g)}; }, [](const T& x) { return ops::gelu(x[0]); }});
  c.push_back({"sigmoid", [=](Rng& g) { return T{rt({4, 5}, g)}; }, [](const T& x) { return ops::sigmoid(x[0]); }});
  c.push_back({"layer_norm", [=](Rng& g) { return T{rt({4, 6}, g), rt({6}, g), rt({6}, g)}; },
               [](const T& x) { return ops::layer_norm(x[0], x[1], x[2]); }});
  c.push_back({"rms_norm", [=](Rng& g) { return T{rt({4, 6}, g), rt({6}, g)}; },
               [](const T& x) { return ops::rms_norm(x[0], x[1]); }});
  c.push_back({"softmax_rows", [=](Rng& g) { return T{rt({4, 5}, g)}; }, [](const T& x) { return ops::softmax_rows(x[0]); }});
  c.push_back({"masked_softmax[10,0,-10] mask 111",
               [](Rng&) {
                 return T{Tensor({1, 3}, {10.0f, 0.0f, -10.0f}, true), Tensor({1, 3}, {1.0f, 1.0f, 1.0f}, true)};
               },
               [](const T& x) { return ops::masked_softmax(x[0], x[1]); }});
  c.push_back({"masked_softmax[10,0,-10] mask 101",
               [](Rng&) {
                 return T{Tensor({1, 3}, {10.0f, 0.0f, -10.0f}, true), Tensor({1, 3}, {1.0f, 0.0f, 1.0f}, true)};
               },
               [](const T& x) { return ops::masked_softmax(x[0], x[1]); }});
  c.push_back({"masked_softmax random", [=](Rng& g) { return T{rt({6, 6}, g), binary_mask(6, g, true)}; },
               [](const T& x) { return ops::masked_softmax(x[0], x[1]); }});
  c.push_back({"multi_head_attention", [=](Rng& g) { return T{rt({5, 12}, g, -1.0f, 1.0f), binary_mask(5, g, true)}; },
               [](const T& x) {
                 const std::vector<float> bias = {0.0f, 0.3f, 0.0f, 0.7f, 0.1f};
                 return ops::multi_head_attention(x[0], 2, &x[1], bias);
               }});
  c.push_back({"gather_rows", [=](Rng& g) { return T{rt({5, 3}, g)}; },
               [](const T& x) {
                 const ops::Index idx = {3, 0, 4};
                 return ops::gather_rows(x[0], idx);
               }});
  c.push_back({"scatter_rows", [=](Rng& g) { return T{rt({2, 3}, g), rt({5, 3}, g)}; },
               [](const T& x) {
                 const ops::Index idx = {4, 1};
                 return ops::scatter_rows(x[0], idx, x[1]);
               }});
  c.push_back({"slice_cols", [=](Rng& g) { return T{rt({3, 6}, g)}; }, [](const T& x) { return ops::slice_cols(x[0], 2, 3); }});
  c.push_back({"concat_cols", [=](Rng& g) { return T{rt({3, 2}, g), rt({3, 4}, g)}; },
               [](const T& x) { return ops::concat_cols({x[0], x[1]}); }});
  c.push_back({"combine_rows", [=](Rng& g) { return T{rt({4, 3}, g)}; },
               [](const T& x) {
                 const std::vector<ops::RowMix> mixes = {{{0, 2}, {0.5f, 0.5f}}, {{1}, {1.0f}}, {{3, 3}, {0.25f, 1.0f}}};
                 return ops::combine_rows(x[0], mixes);
               }});
  c.push_back({"sum", [=](Rng& g) { return T{rt({3, 4}, g)}; }, [](const T& x) { return ops::sum(x[0]); }});
  c.push_back({"mean", [=](Rng& g) { return T{rt({3, 4}, g)}; }, [](const T& x) { return ops::mean(x[0]); }});
  c.push_back({"bce_with_logits", [=](Rng& g) { return T{rt({3, 4}, g), random_tensor({3, 4}, g, 0.0f, 1.0f, false)}; },
               [](const T& x) { return ops::bce_with_logits(x[0], x[1]); }});
  c.push_back({"bilinear_resize up", [=](Rng& g) { return T{rt({3, 4}, g)}; },
               [](const T& x) { return ops::bilinear_resize(x[0], 7, 9); }});
  c.push_back({"bilinear_resize down", [=](Rng& g) { return T{rt({8, 8}, g)}; },
               [](const T& x) { return ops::bilinear_resize(x[0], 3, 2); }});
  c.push_back({"mhsa", [=](Rng& g) {
                 T in{rt({5, 8}, g, -1.0f, 1.0f), binary_mask(5, g, false)};
                 const BlockWeights w = random_block(8, 16, g);
                 for (const Tensor& t : {w.qkv_weight, w.qkv_bias, w.proj_weight, w.proj_bias}) in.push_back(t);
                 return in;
               },
               [](const T& x) {
                 BlockWeights w;
                 w.qkv_weight = x[2], w.qkv_bias = x[3], w.proj_weight = x[4], w.proj_bias = x[5];
                 return mhsa(x[0], &x[1], w, 2);
               }});
  c.push_back({"block", [=](Rng& g) {
                 T in{rt({5, 8}, g, -1.0f, 1.0f), binary_mask(5, g, false)};
                 const BlockWeights w = random_block(8, 16, g);
                 for (const Tensor& t : {w.ln1_gamma, w.ln1_beta, w.qkv_weight, w.qkv_bias, w.proj_weight, w.proj_bias,
                                         w.ls1, w.ln2_gamma, w.ln2_beta, w.fc1_weight, w.fc1_bias, w.fc2_weight,
                                         w.fc2_bias, w.ls2})
                   in.push_back(t);
                 return in;
               },
               [](const T& x) {
                 BlockWeights w{x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10], x[11], x[12], x[13], x[14], x[15]};
                 return block_apply(x[0], &x[1], w, 2);
               }});
  c.push_back({"predict_policy", [=](Rng& g) {
                 return T{rt({6, 8}, g), rt({8}, g), rt({8, 4}, g, -1.0f, 1.0f), rt({4}, g), rt({4, 1}, g, -1.0f, 1.0f),
                          rt({1}, g), rt({1}, g)};
               },
               [](const T& x) {
                 PredictorWeights w{x[1], x[2], x[3], x[4], x[5], x[6]};
                 return predict_policy(x[0], w);
               }});
  c.push_back({"ratio_loss", [=](Rng& g) { return T{rt({8}, g, 0.0f, 1.0f), rt({8}, g, 0.0f, 1.0f)}; },
               [](const T& x) {
                 const PruneSchedule s = PruneSchedule::hierarchical(9, 0.7, 3, 3);
                 return ratio_loss({{x[0], x[1]}}, s);
               }});
  c.push_back({"informed_policy_loss", [=](Rng& g) { return T{rt({8}, g), rt({8}, g)}; },
               [](const T& x) {
                 const Tensor target({8}, {0, 1, 0.5f, 0.25f, 1, 0, 0, 0.75f});
                 return informed_policy_loss({{x[0], x[1]}}, {target}, 8.0f);
               }});
  c.push_back({"head_forward", [=](Rng& g) { return T{rt({4, 6}, g), rt({6}, g), rt({6}, g), rt({6, 1}, g), rt({1}, g)}; },
               [](const T& x) {
                 SegHeadWeights w{x[1], x[2], x[3], x[4]};
                 BackboneConfig cfg;
                 cfg.image_h = cfg.image_w = 8;
                 cfg.patch_h = cfg.patch_w = 4;
                 return head_forward(x[0], w, cfg);
               }});
  c.push_back({"seg_loss", [=](Rng& g) { return T{rt({5, 5}, g)}; },
               [](const T& x) {
                 std::vector<float> gt(25);
                 for (std::size_t i = 0; i < 25; ++i) gt[i] = (i * 7 % 3 == 0) ? 1.0f : 0.0f;
                 return seg_loss(x[0], Tensor({5, 5}, std::move(gt)));
               }});
  return c;
}

}  // namespace vitprune::testing
