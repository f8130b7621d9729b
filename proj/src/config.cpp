#include "vitprune/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "vitprune/errors.hpp"

namespace vitprune {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = first + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
  return value;
}

template <typename T>
std::string format_number(T value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  (void)ec;
  return std::string(buf, ptr);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

std::string format_bool(bool b) { return b ? "true" : "false"; }

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
  }
  return out;
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define NUM_KEY(NAME, FIELD, TYPE)                                                                           \
  Key {                                                                                                      \
    NAME, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_number<TYPE>(k, v); }, \
        [](const RunConfig& c) { return format_number<TYPE>(c.FIELD); }                                      \
  }

#define BOOL_KEY(NAME, FIELD)                                                                          \
  Key {                                                                                                \
    NAME, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_bool(k, v); }, \
        [](const RunConfig& c) { return format_bool(c.FIELD); }                                        \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      NUM_KEY("image_size", model.backbone.image_h, std::size_t),
      NUM_KEY("patch_size", model.backbone.patch_h, std::size_t),
      NUM_KEY("depth", model.backbone.depth, std::size_t),
      NUM_KEY("dim", model.backbone.dim, std::size_t),
      NUM_KEY("heads", model.backbone.heads, std::size_t),
      NUM_KEY("mlp_ratio", model.backbone.mlp_ratio, float),
      NUM_KEY("layer_scale_init", model.backbone.layer_scale_init, float),
      NUM_KEY("first_block", model.first_block, std::size_t),
      NUM_KEY("stage_len", model.stage_len, std::size_t),
      Key{"taps", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.taps = parse_list(k, v); },
          [](const RunConfig& c) { return format_list(c.model.taps); }},
      NUM_KEY("predictor_scale_init", model.predictor_scale_init, float),
      Key{"mode", [](RunConfig& c, const std::string&, const std::string& v) { c.mode = parse_mode(v); },
          [](const RunConfig& c) { return mode_name(c.mode); }},
      NUM_KEY("keep_ratio", keep_ratio, double),
      Key{"policy_objective",
          [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "ratio") c.objective = PolicyObjective::Ratio;
            else if (v == "informed") c.objective = PolicyObjective::Informed;
            else throw ConfigError("key '" + k + "': expected ratio or informed, got '" + v + "'");
          },
          [](const RunConfig& c) { return objective_name(c.objective); }},
      NUM_KEY("lambda_pol", lambda_pol, float),
      NUM_KEY("ratio_weight", ratio_weight, float),
      NUM_KEY("route_fraction", route_fraction, double),
      BOOL_KEY("mask_in_route", mask_in_route),
      NUM_KEY("merge_ratio", merge_ratio, double),
      NUM_KEY("temperature", temperature, float),
      NUM_KEY("lr", lr, double),
      NUM_KEY("weight_decay", weight_decay, double),
      NUM_KEY("beta1", beta1, double),
      NUM_KEY("beta2", beta2, double),
      NUM_KEY("llrd", llrd, double),
      NUM_KEY("ema_decay", ema_decay, double),
      NUM_KEY("warmup_head", warmup_head, std::size_t),
      NUM_KEY("warmup_backbone", warmup_backbone, std::size_t),
      NUM_KEY("poly_power", poly_power, double),
      NUM_KEY("epochs", epochs, std::size_t),
      NUM_KEY("batch_size", batch_size, std::size_t),
      NUM_KEY("grad_accum", grad_accum, std::size_t),
      NUM_KEY("seed", seed, std::uint64_t),
      NUM_KEY("num_samples", num_samples, std::size_t),
      NUM_KEY("data_seed", data_seed, std::uint64_t),
      BOOL_KEY("augment", augment),
  };
  return table;
}

#undef NUM_KEY
#undef BOOL_KEY

const Key& find_key(const std::string& name) {
  for (const Key& k : keys())
    if (name == k.name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

// Keys that a mode ignores are rejected when set and left out of dumps.
bool applies(const std::string& key, Mode mode) {
  if (key == "route_fraction" || key == "mask_in_route") return !mode_merges(mode);
  if (key == "merge_ratio") return !mode_prunes(mode);
  return true;
}

}  // namespace

std::string objective_name(PolicyObjective objective) {
  return objective == PolicyObjective::Ratio ? "ratio" : "informed";
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_key(key).set(*this, key, trim(value));
  // Square images and patches only.
  if (key == "image_size") model.backbone.image_w = model.backbone.image_h;
  if (key == "patch_size") model.backbone.patch_w = model.backbone.patch_h;
  explicit_keys.insert(key);
}

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

void RunConfig::validate() const {
  model.backbone.validate();
  (void)model.effective_taps();
  for (const std::string& k : explicit_keys) {
    if (!applies(k, mode)) throw ConfigError("key '" + k + "' does not apply to mode " + mode_name(mode));
  }
  if (model.first_block >= model.backbone.depth) throw ConfigError("key 'first_block': must be below depth");
  if (model.stage_len == 0) throw ConfigError("key 'stage_len': must be positive");
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("key 'keep_ratio': must lie in (0, 1]");
  if (!(route_fraction >= 0.0 && route_fraction < 1.0)) throw ConfigError("key 'route_fraction': must lie in [0, 1)");
  if (!(merge_ratio >= 0.0 && merge_ratio <= 1.0)) throw ConfigError("key 'merge_ratio': must lie in [0, 1]");
  if (!(temperature > 0.0f)) throw ConfigError("key 'temperature': must be positive");
  if (!(lr >= 0.0)) throw ConfigError("key 'lr': must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("key 'beta1/beta2': must lie in [0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("key 'ema_decay': must lie in [0, 1]");
  if (!(llrd > 0.0 && llrd <= 1.0)) throw ConfigError("key 'llrd': must lie in (0, 1]");
  if (batch_size == 0) throw ConfigError("key 'batch_size': must be positive");
  if (grad_accum == 0) throw ConfigError("key 'grad_accum': must be positive");
  if (mode_routes(mode) && model.backbone.depth < 5) throw ConfigError("routing needs depth >= 5");
  if (num_samples < 3) throw ConfigError("key 'num_samples': need at least 3 samples");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const Key& k : keys()) {
    if (applies(k.name, mode)) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  }
  return out;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::uint64_t config_hash(const RunConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string config_hash_hex(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(config)));
  return buf;
}

}  // namespace vitprune
