#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "vitprune/bench.hpp"
#include "vitprune/checkpoint.hpp"
#include "vitprune/config.hpp"
#include "vitprune/data.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/evaluate.hpp"
#include "vitprune/train.hpp"

namespace fs = std::filesystem;
using namespace vitprune;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by every subcommand that builds a RunConfig.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> modes;
  std::vector<std::string> sets;
  std::string data_dir;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--mode", modes, "none|prune|prune+fixed_route|prune+random_route|tome_mhsa|tome_mhsa_mlp");
    app->add_option("--set", sets, "override as key=value (repeatable)");
    app->add_option("--data", data_dir, "dataset directory from gen-data; generated in memory when absent");
  }

  RunConfig build(std::optional<RunConfig> base = std::nullopt) const {
    RunConfig c = base ? *base : (config_path.empty() ? RunConfig{} : RunConfig::load(config_path));
    std::optional<std::string> mode;
    for (const auto& m : modes) {
      if (mode && *mode != m) throw UsageError("conflicting --mode flags: " + *mode + " vs " + m);
      mode = m;
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      if (key == "mode") {
        if (mode && *mode != value) throw UsageError("conflicting mode: --mode " + *mode + " vs --set mode=" + value);
        mode = value;
        continue;
      }
      c.set(key, value);
    }
    if (mode) c.set("mode", *mode);
    c.validate();
    return c;
  }

  std::vector<Sample> dataset(const RunConfig& c) const {
    if (!data_dir.empty()) return load_dataset(data_dir);
    return generate(c.data_seed, c.num_samples, c.model.backbone.image_h, c.model.backbone.image_w);
  }
};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  return os;
}

std::vector<const Sample*> pick(const std::vector<Sample>& data, const std::string& split, std::size_t limit) {
  auto s = select_split(data, parse_split(split));
  if (limit && s.size() > limit) s.resize(limit);
  if (s.empty()) throw UsageError("split '" + split + "' is empty");
  return s;
}

std::string results_header() { return "mode,keep_ratio,dice,ap,imgs_per_sec"; }

std::string results_row(const RunConfig& c, const EvalReport& r, std::optional<double> ips) {
  std::ostringstream os;
  os << mode_name(c.mode) << ',' << (mode_merges(c.mode) ? c.merge_ratio : c.keep_ratio) << ',' << r.dice << ','
     << r.ap << ',';
  if (ips) os << *ips;
  return os.str();
}

Checkpoint load_with_overrides(const std::string& dir, const ConfigFlags& flags) {
  Checkpoint ck = load_checkpoint(dir);
  ck.config = flags.build(ck.config);
  return ck;
}

int cmd_gen_data(const ConfigFlags& flags, const std::string& out) {
  const RunConfig c = flags.build();
  const auto data = generate(c.data_seed, c.num_samples, c.model.backbone.image_h, c.model.backbone.image_w);
  save_dataset(out, data);
  const auto counts = split_counts(data.size());
  std::cerr << "wrote " << data.size() << " samples (" << counts.train << "/" << counts.val << "/" << counts.test
            << ") to " << out << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& out, std::size_t max_steps) {
  const RunConfig c = flags.build();
  const fs::path dir(out);
  fs::create_directories(dir);
  {
    auto os = open_out(dir / "config.cfg");
    os << c.dump();
  }
  std::ofstream log(dir / "train.log");
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    int overflow(int ch) override {
      if (ch == EOF) return !EOF;
      return a->sputc(static_cast<char>(ch)) == EOF || b->sputc(static_cast<char>(ch)) == EOF ? EOF : ch;
    }
    int sync() override { return a->pubsync() | b->pubsync(); }
  } tee;
  tee.a = std::cerr.rdbuf();
  tee.b = log.rdbuf();
  std::ostream both(&tee);

  const auto data = flags.dataset(c);
  TrainOptions opt;
  opt.out_dir = dir;
  opt.log = &both;
  opt.max_steps = max_steps;
  both << "config " << config_hash_hex(c) << " mode " << mode_name(c.mode) << "\n";
  const TrainResult r = train(c, data, opt);
  save_checkpoint(dir / "checkpoint", r.model, c);
  if (r.test) {
    auto os = open_out(dir / "results.csv");
    os << results_header() << '\n' << results_row(c, *r.test, std::nullopt) << '\n';
    both << "test dice " << r.test->dice << " ap " << r.test->ap << "\n";
  }
  return 0;
}

int cmd_eval(const ConfigFlags& flags, const std::string& ckpt, const std::string& split, const std::string& out,
             std::size_t bench_iters) {
  const Checkpoint ck = load_with_overrides(ckpt, flags);
  const auto data = flags.dataset(ck.config);
  const InferenceSettings settings = InferenceSettings::from_config(ck.config);
  const EvalReport r = evaluate(ck.model, pick(data, split, 0), settings);
  const auto records = report_records(ck.config, r, split);
  for (const auto& line : records) std::cout << line << '\n';
  std::optional<double> ips;
  if (bench_iters) ips = bench_throughput(ck.model, settings, std::min<std::size_t>(20, bench_iters), bench_iters).imgs_per_sec;
  if (!out.empty()) {
    auto js = open_out(fs::path(out) / "eval.jsonl");
    for (const auto& line : records) js << line << '\n';
    auto cs = open_out(fs::path(out) / "results.csv");
    cs << results_header() << '\n' << results_row(ck.config, r, ips) << '\n';
  }
  return 0;
}

int cmd_depthwise(const ConfigFlags& flags, const std::vector<std::string>& ckpts, std::vector<std::string> labels,
                  const std::string& split, const std::string& out) {
  if (!labels.empty() && labels.size() != ckpts.size()) throw UsageError("--label count must match --ckpt count");
  std::ostringstream csv;
  csv << "run,mode,keep_ratio,block,ap,is_final\n";
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    const Checkpoint ck = load_with_overrides(ckpts[i], flags);
    const auto data = flags.dataset(ck.config);
    const EvalReport r = evaluate(ck.model, pick(data, split, 0), InferenceSettings::from_config(ck.config));
    const std::string label = labels.empty() ? fs::path(ckpts[i]).lexically_normal().filename().string() : labels[i];
    for (const auto& [block, ap] : r.per_block) {
      csv << label << ',' << mode_name(ck.config.mode) << ',' << ck.config.keep_ratio << ',' << block << ',' << ap << ','
          << (block == r.per_block.back().first ? 1 : 0) << '\n';
    }
  }
  std::cout << csv.str();
  if (!out.empty()) open_out(fs::path(out) / "depthwise.csv") << csv.str();
  return 0;
}

int cmd_bench(const ConfigFlags& flags, const std::string& ckpt, std::vector<double> ratios, std::size_t warmup,
              std::size_t iters, const std::string& out) {
  Model model;
  RunConfig c;
  if (!ckpt.empty()) {
    Checkpoint ck = load_with_overrides(ckpt, flags);
    model = std::move(ck.model);
    c = ck.config;
  } else {
    c = flags.build();
    Rng rng(c.seed, 0);
    model = Model::init(c.model, rng);
  }
  const int threads = configure_threads();
  if (ratios.empty()) ratios.push_back(mode_merges(c.mode) ? c.merge_ratio : c.keep_ratio);
  std::ostringstream csv, jsonl;
  csv << BenchResult::csv_header() << '\n';
  for (double ratio : ratios) {
    InferenceSettings s = InferenceSettings::from_config(c);
    if (mode_merges(c.mode)) s.merge_ratio = ratio;
    else if (mode_prunes(c.mode)) s.keep_ratio = ratio;
    else if (ratio != 1.0) throw UsageError("mode none runs every token; use a pruning or merging mode to vary the ratio");
    BenchResult r = bench_throughput(model, s, warmup, iters);
    r.config_hash = config_hash_hex(c);
    r.threads = threads;
    csv << r.to_csv() << '\n';
    jsonl << r.to_json() << '\n';
    std::cout << r.to_json() << '\n' << std::flush;
  }
  if (!out.empty()) {
    open_out(fs::path(out) / "bench.csv") << csv.str();
    open_out(fs::path(out) / "bench.jsonl") << jsonl.str();
  }
  return 0;
}

int cmd_simcheck(const ConfigFlags& flags, const std::string& ckpt, const std::string& split, std::size_t samples,
                 const std::string& out) {
  const Checkpoint ck = load_with_overrides(ckpt, flags);
  const auto data = flags.dataset(ck.config);
  const auto sim = similarity_matrix(ck.model, pick(data, split, samples), InferenceSettings::from_config(ck.config));
  std::ostringstream csv;
  csv << "block";
  for (std::size_t j = 0; j < sim.size(); ++j) csv << ',' << j;
  csv << '\n';
  for (std::size_t i = 0; i < sim.size(); ++i) {
    csv << i;
    for (double v : sim[i]) csv << ',' << v;
    csv << '\n';
  }
  std::cout << csv.str();
  std::cerr << "consecutive similarity over blocks [" << ck.config.model.first_block << ", " << sim.size()
            << "): " << consecutive_similarity(sim, ck.config.model.first_block) << "\n";
  if (!out.empty()) open_out(fs::path(out) / "simcheck.csv") << csv.str();
  return 0;
}

int cmd_policyfreq(const ConfigFlags& flags, const std::string& ckpt, const std::string& split, std::size_t index,
                   const std::string& out) {
  const Checkpoint ck = load_with_overrides(ckpt, flags);
  const auto data = flags.dataset(ck.config);
  const auto s = pick(data, split, 0);
  if (index >= s.size()) throw UsageError("--index past the end of split '" + split + "'");
  const PolicyFrequency pf = policy_frequency(ck.model, normalize(s[index]->image), ck.config.schedule());
  const auto freq = pf.frequencies();
  std::ostringstream csv;
  csv << "row,col,count,frequency\n";
  for (std::size_t i = 0; i < freq.size(); ++i)
    csv << i / pf.grid_w << ',' << i % pf.grid_w << ',' << pf.counts[i] << ',' << freq[i] << '\n';
  std::cout << csv.str();
  if (!out.empty()) {
    open_out(fs::path(out) / "policyfreq.csv") << csv.str();
    std::vector<float> grid(freq.begin(), freq.end());
    write_pgm(fs::path(out) / "policyfreq.pgm", Tensor({pf.grid_h, pf.grid_w}, std::move(grid)));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token pruning and routing for ViT segmentation"};
  app.require_subcommand(1);
  ConfigFlags flags;
  std::string out, ckpt, split = "test";
  std::vector<std::string> ckpts, labels;
  std::vector<double> ratios;
  std::size_t max_steps = 0, warmup = 20, iters = 200, bench_iters = 0, samples = 0, index = 0;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset");
  flags.attach(gen);
  gen->add_option("--out", out, "dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a model; writes metrics.jsonl, train.log and checkpoint/");
  flags.attach(tr);
  tr->add_option("--out", out, "run directory")->required();
  tr->add_option("--max-steps", max_steps, "stop after this many optimiser steps");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; prints JSONL records");
  flags.attach(ev);
  ev->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  ev->add_option("--split", split, "train|val|test");
  ev->add_option("--out", out, "writes eval.jsonl and results.csv");
  ev->add_option("--bench-iters", bench_iters, "also time this many forward passes for results.csv");

  auto* dw = app.add_subcommand("depthwise", "AP at every tapped block for one or more checkpoints");
  flags.attach(dw);
  dw->add_option("--ckpt", ckpts, "checkpoint directory (repeatable)")->required();
  dw->add_option("--label", labels, "row label per checkpoint");
  dw->add_option("--split", split, "train|val|test");
  dw->add_option("--out", out, "writes depthwise.csv");

  auto* bn = app.add_subcommand("bench", "batch-1 forward throughput");
  flags.attach(bn);
  bn->add_option("--ckpt", ckpt, "checkpoint directory; a fresh model from the config otherwise");
  bn->add_option("--keep-ratio,--merge-ratio", ratios, "ratio to time (repeatable)");
  bn->add_option("--warmup", warmup, "untimed passes");
  bn->add_option("--iters", iters, "timed passes");
  bn->add_option("--out", out, "writes bench.csv and bench.jsonl");

  auto* sc = app.add_subcommand("simcheck", "block-to-block cosine similarity matrix");
  flags.attach(sc);
  sc->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  sc->add_option("--split", split, "train|val|test");
  sc->add_option("--samples", samples, "use the first N samples of the split (0 = all)");
  sc->add_option("--out", out, "writes simcheck.csv");

  auto* pf = app.add_subcommand("policyfreq", "per-token selection frequency over the pruned blocks");
  flags.attach(pf);
  pf->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  pf->add_option("--split", split, "train|val|test");
  pf->add_option("--index", index, "sample index within the split");
  pf->add_option("--out", out, "writes policyfreq.csv and policyfreq.pgm");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(flags, out);
    if (*tr) return cmd_train(flags, out, max_steps);
    if (*ev) return cmd_eval(flags, ckpt, split, out, bench_iters);
    if (*dw) return cmd_depthwise(flags, ckpts, labels, split, out);
    if (*bn) return cmd_bench(flags, ckpt, ratios, warmup, iters, out);
    if (*sc) return cmd_simcheck(flags, ckpt, split, samples, out);
    if (*pf) return cmd_policyfreq(flags, ckpt, split, index, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
