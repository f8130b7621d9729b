#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "vitprune/evaluate.hpp"
#include "vitprune/model.hpp"

namespace vitprune {

struct BenchResult {
  std::string config_hash;
  std::string mode;
  double ratio = 1.0;  // keep ratio, or merge ratio for merge modes
  std::size_t tokens = 0;
  int threads = 1;
  std::size_t warmup = 0;
  std::size_t iters = 0;
  double imgs_per_sec = 0.0;      // iters / total timed seconds
  double imgs_per_sec_std = 0.0;  // over per-iteration rates
  double latency_mean_ms = 0.0;
  double latency_p50_ms = 0.0;
  double latency_p90_ms = 0.0;
  double latency_p99_ms = 0.0;

  std::string to_json() const;
  static std::string csv_header();
  std::string to_csv() const;
};

/// Sets the BLAS thread count from VITPRUNE_THREADS (default 1); returns it.
int configure_threads();

/// Times `iters` batch-1 inference passes on one fixed random input after
/// `warmup` untimed passes.
BenchResult bench_throughput(const Model& model, const InferenceSettings& settings, std::size_t warmup = 20,
                             std::size_t iters = 200, std::uint64_t input_seed = 0);

}  // namespace vitprune
