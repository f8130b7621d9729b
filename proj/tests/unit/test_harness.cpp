#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "vitprune/bench.hpp"
#include "vitprune/checkpoint.hpp"
#include "vitprune/config.hpp"
#include "vitprune/data.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/evaluate.hpp"
#include "vitprune/optim.hpp"
#include "vitprune/train.hpp"

using namespace vitprune;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const std::string& mode = "prune") {
  return RunConfig::parse(
      "image_size = 32\npatch_size = 8\ndim = 16\nheads = 2\nepochs = 2\nbatch_size = 2\ngrad_accum = 1\n"
      "num_samples = 20\nlr = 1e-3\nema_decay = 0.9\nwarmup_head = 2\nwarmup_backbone = 2\nmode = " +
      mode + "\n");
}

const std::vector<Sample>& tiny_data() {
  static const std::vector<Sample> data = generate(7, 20, 32, 32);
  return data;
}

std::vector<float> flat_params(const Model& m) {
  std::vector<float> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST(Config, DumpParseRoundTrip) {
  for (const char* mode : {"none", "prune", "prune+fixed_route", "prune+random_route", "tome_mhsa", "tome_mhsa_mlp"}) {
    RunConfig c = tiny_config(mode);
    c.set("seed", "17");
    const RunConfig back = RunConfig::parse(c.dump());
    EXPECT_EQ(back, c) << mode;
    back.validate();
  }
}

TEST(Config, ErrorsNameTheKey) {
  try {
    RunConfig::parse("keep_ratioo = 0.5\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("keep_ratioo"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::parse("lr = fast\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("mode = tome_mhsa\nroute_fraction = 0.3\n").validate(), ConfigError);
  EXPECT_THROW(RunConfig::parse("mode = prune\nmerge_ratio = 0.3\n").validate(), ConfigError);
  EXPECT_THROW(RunConfig::parse("keep_ratio = 1.5\n").validate(), ConfigError);
  EXPECT_THROW(RunConfig::parse("mode = prune+magic\n"), ConfigError);
}

TEST(Config, HashFollowsDump) {
  RunConfig a = tiny_config(), b = tiny_config();
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.set("keep_ratio", "0.5");
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Schedule, WarmupAndPolyEndpoints) {
  const LrSchedule s{10, 20, 100, 1.0};
  EXPECT_EQ(s.factor(ParamGroup::Head, 0), 0.0);
  EXPECT_EQ(s.factor(ParamGroup::Backbone, 0), 0.0);
  EXPECT_EQ(s.factor(ParamGroup::Backbone, 9), 0.0);
  EXPECT_DOUBLE_EQ(s.factor(ParamGroup::Head, 10), 1.0);
  EXPECT_DOUBLE_EQ(s.factor(ParamGroup::Backbone, 30), 1.0);
  EXPECT_EQ(s.factor(ParamGroup::Head, 100), 0.0);
  EXPECT_EQ(s.factor(ParamGroup::Backbone, 100), 0.0);
  EXPECT_NEAR(s.factor(ParamGroup::Head, 55), 0.5, 1e-12);
}

TEST(Optim, AdamWFirstStep) {
  const Tensor w({2}, {1.0f, -2.0f}, true);
  ParamList params = {{"w", w, ParamGroup::Head, 0, true}};
  AdamW opt(params, AdamWOptions{0.1, 0.5, 0.9, 0.999, 1e-8, 1.0, 0});
  ops::sum(ops::mul(w, Tensor({2}, {3.0f, -0.5f}))).backward();
  opt.step(LrSchedule{0, 0, 1000, 1.0});
  // decoupled decay first, then a unit-magnitude Adam step
  EXPECT_NEAR(w.at(0), 1.0 * (1 - 0.05) - 0.1, 1e-6);
  EXPECT_NEAR(w.at(1), -2.0 * (1 - 0.05) + 0.1, 1e-6);
}

TEST(Optim, LayerDecayScalesBackbone) {
  const Tensor w({1}, {1.0f}, true);
  AdamW opt({}, AdamWOptions{1.0, 0, 0.9, 0.999, 1e-8, 0.5, 4});
  EXPECT_DOUBLE_EQ(opt.param_lr({"a", w, ParamGroup::Backbone, 4, true}, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(opt.param_lr({"b", w, ParamGroup::Backbone, 2, true}, 1.0), 0.25);
  EXPECT_DOUBLE_EQ(opt.param_lr({"c", w, ParamGroup::Head, 0, true}, 1.0), 1.0);
}

TEST(Optim, EmaOneStep) {
  const Tensor w({1}, {2.0f}, true);
  ParamList params = {{"w", w, ParamGroup::Head, 0, true}};
  Ema ema(params, 0.9);
  w.data_mut()[0] = 5.0f;
  ema.update(params);
  EXPECT_NEAR(ema.shadow()[0][0], 0.9 * 2.0 + 0.1 * 5.0, 1e-6);
}

TEST(Checkpoint, SaveLoadReproducesInference) {
  const fs::path dir = fs::temp_directory_path() / "vitprune_test_ckpt";
  fs::remove_all(dir);
  const RunConfig cfg = tiny_config();
  Rng rng(3);
  const Model model = Model::init(cfg.model, rng);
  save_checkpoint(dir, model, cfg);
  const Checkpoint ck = load_checkpoint(dir);
  EXPECT_EQ(ck.config, cfg);
  EXPECT_EQ(flat_params(ck.model), flat_params(model));
  fs::remove(dir / "head.bias.rten");
  EXPECT_THROW(load_checkpoint(dir), Error);
  fs::remove_all(dir);
}

TEST(Train, DeterministicMetrics) {
  const RunConfig cfg = tiny_config("prune+random_route");
  TrainOptions opt;
  opt.max_steps = 4;
  const TrainResult a = train(cfg, tiny_data(), opt), b = train(cfg, tiny_data(), opt);
  EXPECT_EQ(a.steps, 4u);
  EXPECT_EQ(a.metrics, b.metrics);
  EXPECT_EQ(flat_params(a.model), flat_params(b.model));
  ASSERT_TRUE(a.test.has_value());
  EXPECT_EQ(a.test->per_block.size(), 5u);
}

TEST(Train, GradAccumulationMatchesLargerBatch) {
  RunConfig big = tiny_config(), acc = tiny_config();
  acc.set("batch_size", "1");
  acc.set("grad_accum", "2");
  TrainOptions opt;
  opt.max_steps = 3;
  opt.final_eval = false;
  const TrainResult a = train(big, tiny_data(), opt), b = train(acc, tiny_data(), opt);
  const auto pa = flat_params(a.raw_model), pb = flat_params(b.raw_model);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) ASSERT_NEAR(pa[i], pb[i], 1e-6f);
}

TEST(Train, EveryModeRuns) {
  TrainOptions opt;
  opt.max_steps = 1;
  opt.final_eval = false;
  for (const char* mode : {"none", "prune", "prune+fixed_route", "tome_mhsa", "tome_mhsa_mlp"}) {
    RunConfig c = tiny_config(mode);
    if (std::string(mode) == "prune") c.set("policy_objective", "ratio");
    EXPECT_EQ(train(c, tiny_data(), opt).steps, 1u) << mode;
  }
}

TEST(Evaluate, FullRatioMatchesDense) {
  const RunConfig cfg = tiny_config();
  Rng rng(4);
  const Model model = Model::init(cfg.model, rng);
  const auto test = select_split(tiny_data(), Split::Test);
  const EvalReport pruned = evaluate(model, test, InferenceSettings{Mode::Prune, 1.0, 0.5});
  const EvalReport dense = evaluate(model, test, InferenceSettings{Mode::None, 1.0, 0.5});
  EXPECT_EQ(pruned.per_block, dense.per_block);
  EXPECT_EQ(pruned.dice, dense.dice);
  ASSERT_EQ(dense.per_block.size(), 5u);
  EXPECT_EQ(dense.per_block.back().first, 11u);
  EXPECT_EQ(dense.per_block.back().second, dense.ap);
}

TEST(Evaluate, UntrainedApNearPrevalence) {
  // labels drawn independently of the images, so no score ordering helps
  const RunConfig cfg = tiny_config();
  Rng rng(5);
  const Model model = Model::init(cfg.model, rng);
  std::vector<Sample> samples(10);
  std::vector<const Sample*> ptrs;
  double positives = 0.0;
  for (auto& s : samples) {
    std::vector<float> img(3 * 32 * 32), mask(32 * 32);
    for (auto& v : img) v = rng.uniform();
    for (auto& v : mask) positives += v = rng.bernoulli(0.1) ? 1.0f : 0.0f;
    s.image = Tensor({3, 32, 32}, img);
    s.mask = Tensor({32, 32}, mask);
    ptrs.push_back(&s);
  }
  const double prevalence = positives / (10.0 * 32 * 32);
  const EvalReport r = evaluate(model, ptrs, InferenceSettings{Mode::None, 1.0, 0.5});
  for (const auto& [block, ap] : r.per_block) EXPECT_NEAR(ap, prevalence, 0.02) << block;
}

TEST(Evaluate, SimilarityMatrixProperties) {
  RunConfig cfg = tiny_config();
  Rng rng(6);
  const Model model = Model::init(cfg.model, rng);
  const auto val = select_split(tiny_data(), Split::Val);
  const auto sim = similarity_matrix(model, val, InferenceSettings{Mode::None, 1.0, 0.5});
  ASSERT_EQ(sim.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_NEAR(sim[i][i], 1.0, 1e-9);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(sim[i][j], sim[j][i]);
  }
  cfg.set("layer_scale_init", "0");
  Rng rng2(6);
  const auto flat = similarity_matrix(Model::init(cfg.model, rng2), val, InferenceSettings{Mode::None, 1.0, 0.5});
  for (const auto& row : flat)
    for (double v : row) EXPECT_NEAR(v, 1.0, 1e-9);
  EXPECT_NEAR(consecutive_similarity(flat, 3), 1.0, 1e-9);
}

TEST(Evaluate, PolicyFrequencyCounting) {
  const RunConfig cfg = tiny_config();
  Rng rng(7);
  const Model model = Model::init(cfg.model, rng);
  const Tensor image = normalize(tiny_data()[0].image);
  const PolicyFrequency full = policy_frequency(model, image, cfg.model.schedule(1.0));
  for (double f : full.frequencies()) EXPECT_EQ(f, 1.0);
  const PolicyFrequency pf = policy_frequency(model, image, cfg.model.schedule(0.7));
  EXPECT_EQ(pf.blocks, 9u);
  std::size_t total = 0, budget = 0;
  for (std::size_t c : pf.counts) total += c;
  for (std::size_t k : pf.block_active) budget += k;
  EXPECT_EQ(total, budget);
  for (double f : pf.frequencies()) {
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
}

TEST(Bench, ProducesRows) {
  const RunConfig cfg = tiny_config();
  Rng rng(8);
  const Model model = Model::init(cfg.model, rng);
  const BenchResult r = bench_throughput(model, InferenceSettings{Mode::Prune, 0.7, 0.5}, 2, 10);
  EXPECT_EQ(r.iters, 10u);
  EXPECT_GT(r.imgs_per_sec, 0.0);
  EXPECT_LE(r.latency_p50_ms, r.latency_p99_ms);
  const auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(commas(BenchResult::csv_header()), commas(r.to_csv()));
  EXPECT_NE(r.to_json().find("\"imgs_per_sec\""), std::string::npos);
}
