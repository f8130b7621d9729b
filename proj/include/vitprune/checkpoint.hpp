#pragma once

#include <filesystem>

#include "vitprune/config.hpp"
#include "vitprune/model.hpp"

namespace vitprune {

/// Fresh model with the same config and copied parameter values.
Model clone_model(const Model& model);

/// `<dir>/config.cfg`, `<dir>/manifest.txt` (name<TAB>file), one RTEN file
/// per parameter.
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const RunConfig& config);

struct Checkpoint {
  RunConfig config;
  Model model;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace vitprune
