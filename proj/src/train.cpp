#include "vitprune/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "vitprune/checkpoint.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/evaluate.hpp"
#include "vitprune/tome.hpp"

namespace vitprune {

namespace {

constexpr std::uint64_t kEpochStride = 1'000'000;

enum Stream : std::uint64_t { kInit = 0, kShuffle = 1, kItem = 2, kRoute = 3 };

}  // namespace

LossParts item_loss(const Model& model, const RunConfig& config, const Sample& sample, Rng& rng,
                    const RouteSpec* route_bounds) {
  const Sample s = config.augment ? augment(sample, rng) : sample;
  const Tensor image = normalize(s.image);
  const PruneSchedule schedule = config.schedule();

  ForwardOutput out;
  RouteSpec route;
  if (mode_prunes(config.mode)) {
    TrainForwardOptions opt;
    opt.temperature = config.temperature;
    opt.mask_in_route = config.mask_in_route;
    if (mode_routes(config.mode) && route_bounds) {
      route = *route_bounds;
      sample_tokens(route, model.config.backbone.tokens(), config.route_fraction, rng);
      opt.route = &route;
    }
    out = pruned_forward_train(model, image, schedule, rng, opt);
  } else if (mode_merges(config.mode)) {
    const MergeScope scope = config.mode == Mode::TomeMhsa ? MergeScope::Mhsa : MergeScope::MhsaMlp;
    out = tome_forward(model, image, config.merge_ratio, scope);
  } else {
    out = dense_forward(model, image);
  }

  LossParts parts;
  const std::vector<Tensor> logits = tap_logits(model, out);
  Tensor total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Tensor l = seg_loss(logits[i], s.mask);
    (i + 1 == logits.size() ? parts.seg : parts.aux) += l.item();
    total = total.defined() ? ops::add(total, l) : l;
  }
  if (mode_prunes(config.mode) && !out.policies.empty()) {
    Tensor pol;
    if (config.objective == PolicyObjective::Ratio) {
      std::vector<Tensor> hard;
      for (const auto& p : out.policies) hard.push_back(p.hard);
      pol = ops::scale(ratio_loss({hard}, schedule), config.ratio_weight);
    } else {
      const Tensor target =
          make_target(s.mask, model.config.backbone.grid_h(), model.config.backbone.grid_w());
      std::vector<Tensor> stage_logits;
      for (const auto& p : out.policies) stage_logits.push_back(p.logits);
      pol = informed_policy_loss({stage_logits}, {target}, config.lambda_pol);
    }
    parts.policy = pol.item();
    total = ops::add(total, pol);
  }
  parts.total = total;
  return parts;
}

std::size_t steps_per_epoch(const RunConfig& config, std::size_t train_items) {
  return train_items / (config.batch_size * config.grad_accum);
}

AdamWOptions adamw_options(const RunConfig& config) {
  AdamWOptions o;
  o.lr = config.lr;
  o.weight_decay = config.weight_decay;
  o.beta1 = config.beta1;
  o.beta2 = config.beta2;
  o.llrd = config.llrd;
  o.depth = config.model.backbone.depth;
  return o;
}

LrSchedule lr_schedule(const RunConfig& config, std::size_t total_steps) {
  LrSchedule s;
  s.warmup_head = config.warmup_head;
  s.warmup_backbone = config.warmup_backbone;
  s.total_steps = total_steps;
  s.poly_power = config.poly_power;
  return s;
}

std::vector<std::string> report_records(const RunConfig& config, const EvalReport& report, const std::string& split) {
  std::vector<std::string> out;
  const std::string hash = config_hash_hex(config);
  const std::string mode = mode_name(config.mode);
  for (const auto& [block, ap] : report.per_block) {
    nlohmann::ordered_json j;
    j["event"] = "eval";
    j["config"] = hash;
    j["mode"] = mode;
    j["split"] = split;
    j["block"] = block;
    j["metric"] = "ap";
    j["value"] = ap;
    out.push_back(j.dump());
  }
  nlohmann::ordered_json j;
  j["event"] = "eval";
  j["config"] = hash;
  j["mode"] = mode;
  j["split"] = split;
  j["block"] = report.per_block.back().first;
  j["metric"] = "dice";
  j["value"] = report.dice;
  out.push_back(j.dump());
  return out;
}

TrainResult train(const RunConfig& config, const std::vector<Sample>& data, const TrainOptions& options) {
  config.validate();
  const std::vector<const Sample*> train_set = select_split(data, Split::Train);
  const std::size_t per_epoch = steps_per_epoch(config, train_set.size());
  if (per_epoch == 0) throw ConfigError("batch_size × grad_accum exceeds the training split");
  std::size_t total_steps = per_epoch * config.epochs;
  if (options.max_steps) total_steps = std::min(total_steps, options.max_steps);

  Rng init_rng(config.seed, kInit);
  Model model = Model::init(config.model, init_rng);
  const ParamList params = model.parameters();
  AdamW opt(params, adamw_options(config));
  Ema ema(params, config.ema_decay);
  const LrSchedule schedule = lr_schedule(config, total_steps);

  TrainResult result{model, model, 0, {}, std::nullopt};
  std::ofstream metrics_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics_file.open(*options.out_dir / "metrics.jsonl");
  }
  auto emit = [&](const std::string& line) {
    result.metrics.push_back(line);
    if (metrics_file.is_open()) metrics_file << line << '\n' << std::flush;
  };

  const std::size_t per_step = config.batch_size * config.grad_accum;
  const float item_scale = 1.0f / static_cast<float>(per_step);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs && step < total_steps; ++epoch) {
    Rng shuffle = Rng(config.seed, kShuffle).fork(epoch);
    const ops::Index order = shuffle.sample_without_replacement(train_set.size(), train_set.size());
    for (std::size_t k = 0; k < per_epoch && step < total_steps; ++k) {
      double loss = 0.0, seg = 0.0, aux = 0.0, pol = 0.0;
      for (std::size_t micro = 0; micro < config.grad_accum; ++micro) {
        const std::size_t micro_index = k * config.grad_accum + micro;
        std::optional<RouteSpec> bounds;
        if (mode_routes(config.mode)) {
          Rng route_rng = Rng(config.seed, kRoute).fork(epoch * kEpochStride + micro_index);
          bounds = sample_bounds(config.model.backbone.depth, config.route_mode(), route_rng);
        }
        for (std::size_t b = 0; b < config.batch_size; ++b) {
          const std::size_t pos = micro_index * config.batch_size + b;
          Rng item_rng = Rng(config.seed, kItem).fork(epoch * kEpochStride + pos);
          LossParts parts;
          try {
            parts = item_loss(model, config, *train_set[order[pos]], item_rng, bounds ? &*bounds : nullptr);
            const Tensor scaled = ops::scale(parts.total, item_scale);
            scaled.backward();
          } catch (const NumericError& e) {
            throw NumericError("non-finite value at step " + std::to_string(step) + ": " + e.what());
          }
          const double l = parts.total.item();
          if (!std::isfinite(l)) throw NumericError("non-finite loss at step " + std::to_string(step));
          loss += l * item_scale;
          seg += parts.seg * item_scale;
          aux += parts.aux * item_scale;
          pol += parts.policy * item_scale;
        }
      }
      opt.step(schedule);
      opt.zero_grad();
      ema.update(params);

      nlohmann::ordered_json j;
      j["event"] = "step";
      j["step"] = step;
      j["epoch"] = epoch;
      j["loss"] = loss;
      j["seg"] = seg;
      j["aux"] = aux;
      j["policy"] = pol;
      j["lr_head"] = config.lr * schedule.factor(ParamGroup::Head, step);
      j["lr_backbone"] = config.lr * schedule.factor(ParamGroup::Backbone, step);
      emit(j.dump());
      ++step;
    }
    if (options.log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *options.log << "epoch " << epoch + 1 << "/" << config.epochs << " step " << step << " loss "
                   << nlohmann::json::parse(result.metrics.back())["loss"].get<double>() << " elapsed " << secs
                   << "s\n"
                   << std::flush;
    }
  }
  result.steps = step;
  result.raw_model = clone_model(model);
  ema.copy_to(params);
  result.model = model;

  if (options.final_eval) {
    const auto test = select_split(data, Split::Test);
    if (!test.empty()) {
      result.test = evaluate(result.model, test, InferenceSettings::from_config(config));
      for (const auto& line : report_records(config, *result.test, "test")) emit(line);
    }
  }
  if (options.out_dir) save_checkpoint(*options.out_dir / "checkpoint", result.model, config);
  return result;
}

}  // namespace vitprune
