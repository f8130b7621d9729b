#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include "vitprune/model.hpp"

namespace vitprune {

enum class PolicyObjective { Ratio, Informed };

/// Everything a training run depends on. Text form is `key = value` per line
/// with `#` comments.
struct RunConfig {
  ModelConfig model;
  Mode mode = Mode::Prune;
  double keep_ratio = 0.7;
  PolicyObjective objective = PolicyObjective::Informed;
  float lambda_pol = 8.0f;
  float ratio_weight = 2.0f;
  double route_fraction = 0.5;
  bool mask_in_route = true;
  double merge_ratio = 0.5;
  float temperature = 1.0f;

  double lr = 2e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double llrd = 0.8;
  double ema_decay = 0.9999;
  std::size_t warmup_head = 200;
  std::size_t warmup_backbone = 400;
  double poly_power = 0.9;

  std::size_t epochs = 75;
  std::size_t batch_size = 2;
  std::size_t grad_accum = 16;
  std::uint64_t seed = 0;

  std::size_t num_samples = 256;
  std::uint64_t data_seed = 1234;
  bool augment = true;

  // Keys set explicitly by a file or override, in the order first seen.
  std::set<std::string> explicit_keys;

  /// Sets one key from its text value; throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Mode-specific checks (e.g. route keys are rejected for merge modes).
  void validate() const;
  /// Every key with its effective value; parse(dump()) == *this.
  std::string dump() const;

  PruneSchedule schedule() const { return model.schedule(keep_ratio); }
  RouteMode route_mode() const {
    return mode == Mode::PruneFixedRoute ? RouteMode::Fixed : RouteMode::Random;
  }

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  bool operator==(const RunConfig& other) const { return dump() == other.dump(); }
};

std::string objective_name(PolicyObjective objective);

/// FNV-1a of the dumped config.
std::uint64_t config_hash(const RunConfig& config);
/// config_hash as 16 hex digits.
std::string config_hash_hex(const RunConfig& config);

}  // namespace vitprune
