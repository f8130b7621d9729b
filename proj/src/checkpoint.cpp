#include "vitprune/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "vitprune/errors.hpp"
#include "vitprune/optim.hpp"
#include "vitprune/rten.hpp"

namespace vitprune {

namespace fs = std::filesystem;

Model clone_model(const Model& model) {
  Rng rng(0);
  Model copy = Model::init(model.config, rng);
  copy_params(model.parameters(), copy.parameters());
  return copy;
}

void save_checkpoint(const fs::path& dir, const Model& model, const RunConfig& config) {
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.cfg");
    cfg << config.dump();
    if (!cfg) throw FormatError("cannot write " + (dir / "config.cfg").string());
  }
  std::ofstream manifest(dir / "manifest.txt");
  for (const ParamRef& p : model.parameters()) {
    const std::string file = p.name + ".rten";
    rten::save(dir / file, p.tensor);
    manifest << p.name << '\t' << file << '\n';
  }
  if (!manifest) throw FormatError("cannot write " + (dir / "manifest.txt").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  RunConfig config = RunConfig::load(dir / "config.cfg");
  config.validate();
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw FormatError("missing manifest.txt in " + dir.string());
  std::map<std::string, std::string> files;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("manifest.txt: malformed line '" + line + "'");
    files[line.substr(0, tab)] = line.substr(tab + 1);
  }
  Rng rng(config.seed);
  Model model = Model::init(config.model, rng);
  for (const ParamRef& p : model.parameters()) {
    const auto it = files.find(p.name);
    if (it == files.end()) throw FormatError("checkpoint is missing parameter " + p.name);
    const Tensor t = rten::load(dir / it->second);
    if (t.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint parameter " + p.name + " has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p.tensor.shape()));
    }
    const auto src = t.data();
    std::copy(src.begin(), src.end(), p.tensor.data_mut().begin());
    files.erase(it);
  }
  if (!files.empty()) throw FormatError("checkpoint has unknown parameter " + files.begin()->first);
  return {std::move(config), std::move(model)};
}

}  // namespace vitprune
