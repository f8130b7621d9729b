#include "vitprune/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include <cblas.h>
#include <json.hpp>

#include "vitprune/errors.hpp"

namespace vitprune {

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

std::string BenchResult::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = config_hash;
  j["mode"] = mode;
  j["ratio"] = ratio;
  j["tokens"] = tokens;
  j["threads"] = threads;
  j["warmup"] = warmup;
  j["iters"] = iters;
  j["imgs_per_sec"] = imgs_per_sec;
  j["imgs_per_sec_std"] = imgs_per_sec_std;
  j["latency_mean_ms"] = latency_mean_ms;
  j["latency_p50_ms"] = latency_p50_ms;
  j["latency_p90_ms"] = latency_p90_ms;
  j["latency_p99_ms"] = latency_p99_ms;
  return j.dump();
}

std::string BenchResult::csv_header() {
  return "config,mode,ratio,tokens,threads,warmup,iters,imgs_per_sec,imgs_per_sec_std,latency_mean_ms,"
         "latency_p50_ms,latency_p90_ms,latency_p99_ms";
}

std::string BenchResult::to_csv() const {
  std::ostringstream os;
  os << config_hash << ',' << mode << ',' << ratio << ',' << tokens << ',' << threads << ',' << warmup << ','
     << iters << ',' << imgs_per_sec << ',' << imgs_per_sec_std << ',' << latency_mean_ms << ',' << latency_p50_ms
     << ',' << latency_p90_ms << ',' << latency_p99_ms;
  return os.str();
}

int configure_threads() {
  int threads = 1;
  if (const char* env = std::getenv("VITPRUNE_THREADS")) {
    threads = std::atoi(env);
    if (threads < 1) throw ConfigError("VITPRUNE_THREADS must be a positive integer");
  }
  openblas_set_num_threads(threads);
  return threads;
}

BenchResult bench_throughput(const Model& model, const InferenceSettings& settings, std::size_t warmup,
                             std::size_t iters, std::uint64_t input_seed) {
  if (iters == 0) throw ValueError("bench: iters must be positive");
  const BackboneConfig& bc = model.config.backbone;
  Rng rng(input_seed, 99);
  std::vector<float> px(3 * bc.image_h * bc.image_w);
  for (auto& v : px) v = rng.normal();
  const Tensor image({3, bc.image_h, bc.image_w}, std::move(px));

  BenchResult r;
  r.mode = mode_name(settings.mode);
  r.ratio = mode_merges(settings.mode) ? settings.merge_ratio : settings.keep_ratio;
  r.tokens = bc.tokens();
  r.threads = openblas_get_num_threads();
  r.warmup = warmup;
  r.iters = iters;

  for (std::size_t i = 0; i < warmup; ++i) (void)infer(model, image, settings);
  std::vector<double> secs(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const ForwardOutput out = infer(model, image, settings);
    secs[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    (void)out;
  }
  double total = 0.0;
  for (double s : secs) total += s;
  r.imgs_per_sec = static_cast<double>(iters) / total;
  double mean_rate = 0.0;
  for (double s : secs) mean_rate += 1.0 / s;
  mean_rate /= static_cast<double>(iters);
  double var = 0.0;
  for (double s : secs) var += (1.0 / s - mean_rate) * (1.0 / s - mean_rate);
  r.imgs_per_sec_std = iters > 1 ? std::sqrt(var / static_cast<double>(iters - 1)) : 0.0;
  r.latency_mean_ms = 1e3 * total / static_cast<double>(iters);
  r.latency_p50_ms = 1e3 * percentile(secs, 0.5);
  r.latency_p90_ms = 1e3 * percentile(secs, 0.9);
  r.latency_p99_ms = 1e3 * percentile(secs, 0.99);
  return r;
}

}  // namespace vitprune
