#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitprune/rng.hpp"
#include "vitprune/tensor.hpp"

namespace vitprune {

enum class Split { Train, Val, Test };

std::string split_name(Split split);
Split parse_split(const std::string& name);

struct Sample {
  Tensor image;  // [3 × H × W] in [0, 1]
  Tensor mask;   // [H × W] in {0, 1}
  std::string id;
  Split split = Split::Train;

  double prevalence() const;
};

/// Knobs for the synthetic vessel generator.
struct VesselStyle {
  int min_levels = 3;
  int max_levels = 6;
  float root_width = 3.0f;      // pixels at 64×64, scaled with image size
  float width_decay = 0.7f;
  float length_decay = 0.75f;
  float vessel_contrast = 0.55f;  // fractional darkening at full coverage
  float noise_amplitude = 0.08f;  // low-frequency background variation
  float pixel_noise = 0.015f;
  int roots = 2;
};

/// One synthetic sample, fully determined by (seed, index).
Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t height, std::size_t width,
                       const VesselStyle& style = {});

/// n samples; the first train_count are train, then val, then test.
std::vector<Sample> generate(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width,
                             const VesselStyle& style = {});

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};
/// 70:20:10 by count; val and test are rounded, the remainder goes to train.
SplitCounts split_counts(std::size_t n);

std::vector<const Sample*> select_split(const std::vector<Sample>& data, Split split);

/// Quadrants of a 2H×2W sample in raster order (TL, TR, BL, BR).
std::vector<Sample> quadrant_split(const Sample& sample);
/// Inverse of quadrant_split.
Sample reassemble_quadrants(const std::vector<Sample>& quadrants);

struct AugmentOptions {
  float flip_p = 0.5f;
  float rotate_p = 0.75f;
  float jitter = 0.4f;  // brightness and contrast amplitude; 0 disables
};

Sample augment(const Sample& sample, Rng& rng, const AugmentOptions& options = {});

Tensor hflip(const Tensor& planes);
Tensor vflip(const Tensor& planes);
/// Rotates [C × H × W] or [H × W] by k quarter turns counter-clockwise.
Tensor rot90(const Tensor& planes, int k);

/// (x − μ)/σ per channel with the ImageNet statistics.
Tensor normalize(const Tensor& image);
Tensor denormalize(const Tensor& image);

// 8-bit binary Netpbm. Values are scaled to [0, 1] and quantised on write.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
void write_pgm(const std::filesystem::path& path, const Tensor& plane);
/// P6 → [3 × H × W], P5 → [H × W], RTEN → stored tensor.
Tensor load_raster(const std::filesystem::path& path);
/// P5 mask binarised at ≥ 128.
Tensor load_mask(const std::filesystem::path& path);

/// `<root>/<split>/<id>.ppm`, `<root>/<split>/<id>.mask.pgm`, `<root>/manifest.tsv`.
void save_dataset(const std::filesystem::path& root, const std::vector<Sample>& data);
std::vector<Sample> load_dataset(const std::filesystem::path& root);

}  // namespace vitprune
