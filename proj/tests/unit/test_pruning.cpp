#include <gtest/gtest.h>

#include <cmath>

#include "../support/grad_cases.hpp"
#include "vitprune/log.hpp"
#include "vitprune/model.hpp"
#include "vitprune/pruning.hpp"

using namespace vitprune;
namespace vt = vitprune::testing;

namespace {

float max_abs_diff(const Tensor& a, const Tensor& b) {
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

ModelConfig small_config(std::size_t image = 32) {
  ModelConfig c;
  c.backbone.image_h = c.backbone.image_w = image;
  c.backbone.dim = 16;
  c.backbone.heads = 2;
  c.backbone.layer_scale_init = 0.5f;
  return c;
}

Tensor random_image(const BackboneConfig& cfg, Rng& rng) {
  return vt::random_tensor({3, cfg.image_h, cfg.image_w}, rng, -2, 2, false);
}

}  // namespace

TEST(Schedule, HierarchicalStageCounts) {
  const PruneSchedule s = PruneSchedule::hierarchical(12, 0.7, 3, 3);
  EXPECT_EQ(s.num_stages(), 3u);
  EXPECT_EQ(s.stage_keep_counts(4096), (std::vector<std::size_t>{2867, 2007, 1405}));
  EXPECT_EQ(s.stage_keep_counts(64), (std::vector<std::size_t>{45, 31, 22}));
  EXPECT_TRUE(s.is_stage_start(6));
  EXPECT_FALSE(s.is_stage_start(7));
  EXPECT_FALSE(s.is_pruned(2));
  EXPECT_DOUBLE_EQ(PruneSchedule::constant(12, 0.5).stage_ratio(2), 0.5);
}

TEST(Schedule, KeepCount) {
  EXPECT_EQ(keep_count(0.49, 4096), 2007u);
  EXPECT_EQ(keep_count(0.343, 4096), 1405u);
  EXPECT_EQ(keep_count(0.7, 64), 45u);
  EXPECT_EQ(keep_count(1.0, 64), 64u);
  EXPECT_EQ(keep_count(0.5, 3), 2u);  // 1.5 rounds away from zero
}

TEST(Predictor, ZeroWeightsAndIdenticalRows) {
  Rng rng(1);
  PredictorWeights w = PredictorWeights::init(8, 0.1f, rng);
  const Tensor row = vt::random_tensor({1, 8}, rng, -1, 1, false);
  std::vector<float> rows;
  for (int i = 0; i < 5; ++i) rows.insert(rows.end(), row.data().begin(), row.data().end());
  const Tensor logits = predict_policy(Tensor({5, 8}, rows), w);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_EQ(logits.at(i), logits.at(0));
  for (const Tensor& t : {w.fc1_weight, w.fc1_bias, w.fc2_weight, w.fc2_bias})
    std::fill(t.data_mut().begin(), t.data_mut().end(), 0.0f);
  const Tensor zero = predict_policy(vt::random_tensor({5, 8}, rng, -1, 1, false), w);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(zero.at(i), 0.0f);
}

TEST(Gumbel, SaturatedLogitKeeps) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(gumbel_st(Tensor::full({1}, 20.0f), 1.0f, rng).hard.at(0), 1.0f);
}

TEST(Gumbel, TieKeepsToken) {
  const std::vector<float> g = {0.3f, -1.0f};
  const PolicyOutput p = gumbel_st(Tensor({2}), 1.0f, g, g);
  EXPECT_EQ(p.soft.at(0), 0.5f);
  EXPECT_EQ(p.hard.at(0), 1.0f);
  EXPECT_EQ(p.hard.at(1), 1.0f);
}

TEST(Gumbel, StraightThroughGradientsMatchSoftPath) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = vt::random_tensor({12}, rng, -3, 3);
    const Tensor c = vt::random_tensor({12}, rng, -1, 1, false);
    // backward frees the graph, so each path gets its own forward with the same noise
    Rng n1(trial), n2(trial);
    ops::sum(ops::mul(gumbel_st(logits, 0.7f, n1).hard, c)).backward();
    const std::vector<float> hard_grad(logits.grad().begin(), logits.grad().end());
    logits.zero_grad();
    ops::sum(ops::mul(gumbel_st(logits, 0.7f, n2).soft, c)).backward();
    for (std::size_t i = 0; i < 12; ++i) ASSERT_EQ(hard_grad[i], logits.grad()[i]);
  }
}

TEST(PolicyMask, Examples) {
  const Tensor m = policy_to_mask(Tensor({3}, {1, 0, 1}));
  const std::vector<float> want = {1, 0, 1, 1, 1, 1, 1, 0, 1};
  EXPECT_EQ(m.to_vector(), want);
  EXPECT_EQ(policy_to_mask(Tensor::full({4}, 1.0f)).to_vector(), std::vector<float>(16, 1.0f));
  const Tensor id = policy_to_mask(Tensor({3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(id.at(i * 3 + j), i == j ? 1.0f : 0.0f);
}

TEST(PolicyMask, GradientSumsOffDiagonalColumn) {
  const Tensor p({3}, {1, 0, 1}, true);
  const Tensor m = policy_to_mask(p);
  std::vector<float> seed(9);
  for (std::size_t i = 0; i < 9; ++i) seed[i] = static_cast<float>(i + 1);
  m.backward(seed);
  // column j, rows i != j
  EXPECT_EQ(p.grad()[0], 4.0f + 7.0f);
  EXPECT_EQ(p.grad()[1], 2.0f + 8.0f);
  EXPECT_EQ(p.grad()[2], 3.0f + 6.0f);
}

TEST(RatioLoss, ClosedForm) {
  const PruneSchedule s = PruneSchedule::hierarchical(9, 0.7, 3, 3);
  auto policy = [](std::size_t ones) {
    std::vector<float> v(100, 0.0f);
    std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(ones), 1.0f);
    return Tensor({100}, v);
  };
  EXPECT_NEAR(ratio_loss({{policy(70), policy(49)}}, s).item(), 0.0, 1e-7);
  EXPECT_NEAR(ratio_loss({{policy(100), policy(100)}}, s).item(), 0.17505, 1e-7);
}

TEST(InformedLoss, ClosedFormAndLimit) {
  const Tensor half = Tensor::full({16}, 0.5f);
  EXPECT_NEAR(informed_policy_loss({{Tensor({16})}}, {half}, 8.0f).item(), 8.0 * std::log(2.0), 1e-5);
  const Tensor target({4}, {1, 0, 1, 0});
  const Tensor sharp({4}, {40, -40, 40, -40});
  EXPECT_LT(informed_policy_loss({{sharp, sharp}}, {target}, 8.0f).item(), 1e-6f);
}

TEST(MakeTarget, Examples) {
  EXPECT_EQ(make_target(Tensor::full({16, 16}, 1.0f), 2, 2).to_vector(), std::vector<float>(4, 1.0f));
  EXPECT_EQ(make_target(Tensor({16, 16}), 2, 2).to_vector(), std::vector<float>(4, 0.0f));
  EXPECT_NEAR(make_target(Tensor({2, 2}, {1, 0, 0, 1}), 1, 1).item(), 0.5f, 1e-7f);
}

TEST(SelectPolicy, FullAndClampedToOne) {
  Rng rng(4);
  const Tensor logits = vt::random_tensor({10}, rng, -1, 1, false);
  EXPECT_EQ(select_inference_policy(logits, 1.0).size(), 10u);
  std::vector<std::string> warnings;
  auto prev = set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  const ops::Index one = select_inference_policy(logits, 0.01);
  set_warning_sink(prev);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_EQ(one, ops::top_k_indices(logits, 1));
}

TEST(PrunedInfer, FullRatioIsBitwiseDense) {
  Rng rng(5);
  const ModelConfig cfg = small_config();
  const Model model = Model::init(cfg, rng);
  const Tensor image = random_image(cfg.backbone, rng);
  NoGradGuard g;
  const ForwardOutput dense = dense_forward(model, image);
  const ForwardOutput pruned = pruned_forward_infer(model, image, PruneSchedule::constant(12, 1.0));
  EXPECT_EQ(dense.state.tokens.to_vector(), pruned.state.tokens.to_vector());
  for (std::size_t t = 0; t < dense.tap_tokens.size(); ++t)
    EXPECT_EQ(dense.tap_tokens[t].to_vector(), pruned.tap_tokens[t].to_vector());
}

TEST(PrunedInfer, ActiveCountsFollowSchedule) {
  Rng rng(6);
  const ModelConfig cfg = small_config(64);
  const Model model = Model::init(cfg, rng);
  NoGradGuard g;
  const ForwardOutput out = pruned_forward_infer(model, random_image(cfg.backbone, rng), cfg.schedule(0.7));
  const std::vector<std::size_t> want = {64, 64, 64, 45, 45, 45, 31, 31, 31, 22, 22, 22};
  EXPECT_EQ(out.active_counts, want);
  ASSERT_EQ(out.selections.size(), 3u);
  EXPECT_EQ(out.selections[2].size(), 22u);
}

TEST(PrunedTrain, KeepAllEqualsDense) {
  Rng rng(7);
  const ModelConfig cfg = small_config();
  const Model model = Model::init(cfg, rng);
  const Tensor image = random_image(cfg.backbone, rng);
  TrainForwardOptions opt;
  opt.sampler = [](const Tensor& logits, std::size_t) {
    const std::vector<float> big(logits.numel(), 50.0f), zero(logits.numel(), 0.0f);
    return gumbel_st(logits, 1.0f, big, zero);
  };
  const ForwardOutput train = pruned_forward_train(model, image, cfg.schedule(0.7), rng, opt);
  const ForwardOutput dense = dense_forward(model, image);
  EXPECT_LT(max_abs_diff(train.state.tokens, dense.state.tokens), 1e-5f);
  ASSERT_EQ(train.policies.size(), 3u);
}

TEST(PrunedTrain, FixedPolicyMatchesGatheredBlock) {
  Rng rng(8);
  const ModelConfig cfg = small_config();
  const Model model = Model::init(cfg, rng);
  const Tensor image = random_image(cfg.backbone, rng);
  const std::size_t n = cfg.backbone.tokens();
  std::vector<float> p(n);
  ops::Index kept;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = (i % 3 != 1) ? 1.0f : 0.0f;
    if (p[i] > 0.0f) kept.push_back(i);
  }
  TrainForwardOptions opt;
  opt.keep_block_outputs = true;
  opt.sampler = [&](const Tensor& logits, std::size_t) {
    PolicyOutput out;
    out.logits = logits;
    out.hard = Tensor({n}, p);
    out.soft = out.hard;
    return out;
  };
  const ForwardOutput train = pruned_forward_train(model, image, cfg.schedule(0.7), rng, opt);
  for (std::size_t b = 3; b < 6; ++b) {
    const Tensor want =
        block_apply(ops::gather_rows(train.block_outputs[b - 1], kept), nullptr, model.backbone.blocks[b], 2);
    EXPECT_LT(max_abs_diff(ops::gather_rows(train.block_outputs[b], kept), want), 1e-5f) << "block " << b;
  }
}
