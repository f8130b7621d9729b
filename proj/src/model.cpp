#include "vitprune/model.hpp"

#include <algorithm>
#include <numeric>
#include <optional>

#include "vitprune/errors.hpp"

namespace vitprune {

namespace {

struct ModeName {
  Mode mode;
  const char* name;
};

constexpr ModeName kModeNames[] = {
    {Mode::None, "none"},
    {Mode::Prune, "prune"},
    {Mode::PruneFixedRoute, "prune+fixed_route"},
    {Mode::PruneRandomRoute, "prune+random_route"},
    {Mode::TomeMhsa, "tome_mhsa"},
    {Mode::TomeMhsaMlp, "tome_mhsa_mlp"},
};

// Collects tap and per-block outputs as blocks finish.
class Recorder {
 public:
  Recorder(const Model& model, ForwardOutput& out, bool keep_blocks)
      : model_(model), out_(out), keep_blocks_(keep_blocks) {
    out_.tap_tokens.resize(model.taps.size());
  }

  bool wants(std::size_t block) const { return keep_blocks_ || tap_slot(block).has_value(); }

  void record(std::size_t block, const Tensor& full) {
    if (keep_blocks_) out_.block_outputs.push_back(full);
    if (auto slot = tap_slot(block)) out_.tap_tokens[*slot] = full;
  }

 private:
  std::optional<std::size_t> tap_slot(std::size_t block) const {
    const auto& taps = model_.taps;
    const auto it = std::find(taps.begin(), taps.end(), block);
    if (it == taps.end()) return std::nullopt;
    return static_cast<std::size_t>(it - taps.begin());
  }

  const Model& model_;
  ForwardOutput& out_;
  bool keep_blocks_;
};

void check_schedule(const Model& model, const PruneSchedule& schedule) {
  if (schedule.depth != model.config.backbone.depth || schedule.first_block != model.config.first_block ||
      schedule.stage_len != model.config.stage_len) {
    throw ConfigError("schedule layout does not match the model's stages");
  }
  if (schedule.num_stages() != model.predictors.size()) throw ConfigError("schedule stage count mismatch");
}

}  // namespace

std::string mode_name(Mode mode) {
  for (const auto& m : kModeNames)
    if (m.mode == mode) return m.name;
  throw ConfigError("unknown mode");
}

Mode parse_mode(const std::string& name) {
  for (const auto& m : kModeNames)
    if (name == m.name) return m.mode;
  throw ConfigError("unknown mode '" + name + "'");
}

bool mode_prunes(Mode mode) {
  return mode == Mode::Prune || mode == Mode::PruneFixedRoute || mode == Mode::PruneRandomRoute;
}
bool mode_routes(Mode mode) { return mode == Mode::PruneFixedRoute || mode == Mode::PruneRandomRoute; }
bool mode_merges(Mode mode) { return mode == Mode::TomeMhsa || mode == Mode::TomeMhsaMlp; }

std::vector<std::size_t> ModelConfig::effective_taps() const {
  const std::size_t depth = backbone.depth;
  std::vector<std::size_t> t = taps;
  if (t.empty()) {
    for (std::size_t b = depth >= 5 ? depth - 5 : 0; b < depth; ++b) t.push_back(b);
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] >= depth) throw ConfigError("tap block " + std::to_string(t[i]) + " beyond depth");
    if (i > 0 && t[i] <= t[i - 1]) throw ConfigError("taps must be strictly increasing");
  }
  if (t.back() != depth - 1) throw ConfigError("the last tap must be the final block");
  return t;
}

PruneSchedule ModelConfig::schedule(double base_ratio) const {
  return PruneSchedule::hierarchical(backbone.depth, base_ratio, first_block, stage_len);
}

Model Model::init(const ModelConfig& config, Rng& rng) {
  config.backbone.validate();
  Model m;
  m.config = config;
  m.taps = config.effective_taps();
  Rng brng = rng.fork(1), prng = rng.fork(2), hrng = rng.fork(3);
  m.backbone = Backbone::init(config.backbone, brng);
  const std::size_t stages = config.schedule(1.0).num_stages();
  for (std::size_t s = 0; s < stages; ++s) {
    m.predictors.push_back(PredictorWeights::init(config.backbone.dim, config.predictor_scale_init, prng));
  }
  m.head = SegHeadWeights::init(config.backbone.dim, hrng);
  for (std::size_t i = 0; i + 1 < m.taps.size(); ++i) m.aux_heads.push_back(SegHeadWeights::init(config.backbone.dim, hrng));
  return m;
}

ParamList Model::parameters() const {
  ParamList out;
  backbone.collect(out);
  for (std::size_t s = 0; s < predictors.size(); ++s) predictors[s].collect(out, "predictor." + std::to_string(s) + ".");
  head.collect(out, "head.");
  for (std::size_t i = 0; i < aux_heads.size(); ++i)
    aux_heads[i].collect(out, "aux_head." + std::to_string(taps[i]) + ".");
  return out;
}

const SegHeadWeights& Model::head_for_tap(std::size_t tap_index) const {
  if (tap_index + 1 == taps.size()) return head;
  if (tap_index >= aux_heads.size()) throw IndexError("tap index " + std::to_string(tap_index) + " out of range");
  return aux_heads[tap_index];
}

Tensor embed_tokens(const Model& model, const Tensor& image) {
  return patch_embed(image, model.backbone.embed, model.config.backbone);
}

ForwardOutput dense_forward(const Model& model, const Tensor& image, bool keep_block_outputs) {
  ForwardOutput out;
  Recorder rec(model, out, keep_block_outputs);
  TokenState state = TokenState::dense(embed_tokens(model, image));
  const std::size_t heads = model.config.backbone.heads;
  for (std::size_t b = 0; b < model.backbone.blocks.size(); ++b) {
    state = block_forward(state, nullptr, model.backbone.blocks[b], heads);
    out.active_counts.push_back(state.size());
    rec.record(b, state.tokens);
  }
  out.state = std::move(state);
  return out;
}

ForwardOutput pruned_forward_infer(const Model& model, const Tensor& image, const PruneSchedule& schedule,
                                   bool keep_block_outputs) {
  check_schedule(model, schedule);
  ForwardOutput out;
  Recorder rec(model, out, keep_block_outputs);
  TokenState state = TokenState::dense(embed_tokens(model, image));
  const std::size_t heads = model.config.backbone.heads;
  const std::size_t n = state.size();
  const std::size_t depth = model.backbone.blocks.size();

  std::size_t b = 0;
  for (; b < schedule.first_block; ++b) {
    state = block_forward(state, nullptr, model.backbone.blocks[b], heads);
    out.active_counts.push_back(n);
    rec.record(b, state.tokens);
  }
  while (b < depth) {
    const std::size_t stage = schedule.stage_of(b);
    const Tensor logits = predict_policy(state.tokens, model.predictors[stage]);
    ops::Index keep = select_inference_policy(logits, schedule.stage_ratio(stage));
    const std::size_t stage_end = std::min(depth, b + schedule.stage_len);
    Tensor active = ops::gather_rows(state.tokens, keep);
    for (; b < stage_end; ++b) {
      active = block_apply(active, nullptr, model.backbone.blocks[b], heads);
      state.tokens = ops::scatter_rows(active, keep, state.tokens);
      state.next_block = b + 1;
      for (std::size_t i : keep) state.stale_since[i] = b + 1;
      out.active_counts.push_back(keep.size());
      rec.record(b, state.tokens);
    }
    state.active_idx = keep;
    out.selections.push_back(std::move(keep));
  }
  out.state = std::move(state);
  return out;
}

ForwardOutput pruned_forward_train(const Model& model, const Tensor& image, const PruneSchedule& schedule, Rng& rng,
                                   const TrainForwardOptions& options) {
  check_schedule(model, schedule);
  ForwardOutput out;
  Recorder rec(model, out, options.keep_block_outputs);
  TokenState state = TokenState::dense(embed_tokens(model, image));
  const std::size_t heads = model.config.backbone.heads;
  const std::size_t n = state.size();
  const std::size_t depth = model.backbone.blocks.size();

  PolicySampler sampler = options.sampler;
  if (!sampler) {
    sampler = [&](const Tensor& logits, std::size_t) { return gumbel_st(logits, options.temperature, rng); };
  }
  auto start_stage = [&](std::size_t block, const Tensor& full) {
    const std::size_t stage = schedule.stage_of(block);
    PolicyOutput p = sampler(predict_policy(full, model.predictors[stage]), stage);
    p.stage = stage;
    out.policies.push_back(std::move(p));
  };
  out.policies.reserve(schedule.num_stages());
  const Tensor* current_policy = nullptr;
  Tensor stage_mask;

  const RouteSpec* route = options.route && !options.route->empty() ? options.route : nullptr;
  if (route && (route->n >= depth || route->l > route->n)) throw ValueError("route bounds outside the model depth");

  std::size_t b = 0;
  while (b < depth) {
    if (route && b == route->l) {
      SpanHooks hooks;
      hooks.policy_for_block = [&](std::size_t blk, const SpanHooks::FullRepr& full) -> const Tensor* {
        if (!schedule.is_pruned(blk)) return nullptr;
        if (schedule.is_stage_start(blk)) {
          start_stage(blk, full());
          current_policy = &out.policies.back().hard;
          stage_mask = Tensor();
        }
        return current_policy;
      };
      hooks.after_block = [&](std::size_t blk, const SpanHooks::FullRepr& full) {
        out.active_counts.push_back(route->kept.size());
        if (rec.wants(blk)) rec.record(blk, full());
      };
      state = routed_span_forward(state, *route, model.backbone, hooks, options.mask_in_route);
      b = route->n + 1;
      continue;
    }
    if (schedule.is_stage_start(b)) {
      start_stage(b, state.tokens);
      current_policy = &out.policies.back().hard;
      stage_mask = Tensor();
    }
    if (schedule.is_pruned(b) && !stage_mask.defined()) stage_mask = policy_to_mask(*current_policy);
    state = block_forward(state, schedule.is_pruned(b) ? &stage_mask : nullptr, model.backbone.blocks[b], heads);
    out.active_counts.push_back(n);
    rec.record(b, state.tokens);
    ++b;
  }
  out.state = std::move(state);
  return out;
}

std::vector<Tensor> tap_logits(const Model& model, const ForwardOutput& out) {
  std::vector<Tensor> logits;
  for (std::size_t i = 0; i < model.taps.size(); ++i) {
    if (!out.tap_tokens[i].defined()) throw ValueError("forward output is missing tap " + std::to_string(model.taps[i]));
    logits.push_back(head_forward(out.tap_tokens[i], model.head_for_tap(i), model.config.backbone));
  }
  return logits;
}

}  // namespace vitprune
