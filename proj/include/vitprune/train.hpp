#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vitprune/config.hpp"
#include "vitprune/data.hpp"
#include "vitprune/model.hpp"
#include "vitprune/optim.hpp"
#include "vitprune/seg_head.hpp"

namespace vitprune {

struct LossParts {
  Tensor total;   // scalar with graph
  double seg = 0.0;     // final head
  double aux = 0.0;     // auxiliary heads
  double policy = 0.0;  // ratio or informed objective
};

/// Forward and loss for one training image. `route` is used only by routing
/// modes; its token split is drawn from `rng` here.
LossParts item_loss(const Model& model, const RunConfig& config, const Sample& sample, Rng& rng,
                    const RouteSpec* route_bounds);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.jsonl + checkpoint/
  std::ostream* log = nullptr;                   // human-readable progress, with timings
  std::size_t max_steps = 0;                     // 0 = full schedule
  bool final_eval = true;
};

struct TrainResult {
  Model model;      // EMA weights
  Model raw_model;  // last optimiser weights
  std::size_t steps = 0;
  std::vector<std::string> metrics;  // JSONL records, no wall-clock fields
  std::optional<EvalReport> test;
};

std::size_t steps_per_epoch(const RunConfig& config, std::size_t train_items);
AdamWOptions adamw_options(const RunConfig& config);
LrSchedule lr_schedule(const RunConfig& config, std::size_t total_steps);

TrainResult train(const RunConfig& config, const std::vector<Sample>& data, const TrainOptions& options = {});

/// EvalReport as JSONL, one record per (block, metric).
std::vector<std::string> report_records(const RunConfig& config, const EvalReport& report, const std::string& split);

}  // namespace vitprune
