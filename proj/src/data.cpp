#include "vitprune/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vitprune/errors.hpp"
#include "vitprune/rten.hpp"

namespace vitprune {

namespace fs = std::filesystem;

namespace {

constexpr std::array<float, 3> kMean = {0.485f, 0.456f, 0.406f};
constexpr std::array<float, 3> kStd = {0.229f, 0.224f, 0.225f};

struct Vec2 {
  float x, y;
};

struct Stroke {
  std::vector<Vec2> pts;  // polyline through the curve
  float width;
};

float quantize(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

void grow(std::vector<Stroke>& out, Vec2 p, float angle, float length, float width, int level, int max_level,
          const VesselStyle& style, Rng& rng) {
  const Vec2 end{p.x + length * std::cos(angle), p.y + length * std::sin(angle)};
  const float bend = rng.uniform(-0.25f, 0.25f) * length;
  const Vec2 ctrl{(p.x + end.x) / 2 - std::sin(angle) * bend, (p.y + end.y) / 2 + std::cos(angle) * bend};
  Stroke s;
  s.width = width;
  constexpr int kPieces = 12;
  for (int i = 0; i <= kPieces; ++i) {
    const float t = static_cast<float>(i) / kPieces, u = 1 - t;
    s.pts.push_back({u * u * p.x + 2 * u * t * ctrl.x + t * t * end.x, u * u * p.y + 2 * u * t * ctrl.y + t * t * end.y});
  }
  out.push_back(std::move(s));
  if (level + 1 >= max_level) return;
  const float end_angle = std::atan2(end.y - ctrl.y, end.x - ctrl.x);
  for (int side : {-1, 1}) {
    const float a = end_angle + static_cast<float>(side) * rng.uniform(0.3f, 0.8f);
    const float len = length * style.length_decay * rng.uniform(0.8f, 1.2f);
    grow(out, end, a, len, width * style.width_decay, level + 1, max_level, style, rng);
  }
}

float segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const float dx = b.x - a.x, dy = b.y - a.y;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

// Coarse random grid, bilinearly upsampled.
std::vector<float> smooth_noise(std::size_t h, std::size_t w, std::size_t cells, Rng& rng) {
  std::vector<float> grid((cells + 1) * (cells + 1));
  for (auto& g : grid) g = rng.normal();
  std::vector<float> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const float gy = static_cast<float>(y) / static_cast<float>(h) * static_cast<float>(cells);
    const auto y0 = static_cast<std::size_t>(gy);
    const float fy = gy - static_cast<float>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const float gx = static_cast<float>(x) / static_cast<float>(w) * static_cast<float>(cells);
      const auto x0 = static_cast<std::size_t>(gx);
      const float fx = gx - static_cast<float>(x0);
      const auto at = [&](std::size_t yy, std::size_t xx) { return grid[yy * (cells + 1) + xx]; };
      out[y * w + x] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                       fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  }
  return out;
}

void require_planes(const Tensor& t, const char* what) {
  if (t.ndim() != 2 && t.ndim() != 3) throw ShapeError(std::string(what) + ": expected [H×W] or [C×H×W]");
}

struct PlaneDims {
  std::size_t c, h, w;
};

PlaneDims plane_dims(const Tensor& t) {
  if (t.ndim() == 2) return {1, t.dim(0), t.dim(1)};
  return {t.dim(0), t.dim(1), t.dim(2)};
}

// out[c, y, x] = in[c, src(y, x)]
template <typename F>
Tensor remap(const Tensor& t, std::size_t out_h, std::size_t out_w, F src) {
  const auto [c, h, w] = plane_dims(t);
  std::vector<float> out(c * out_h * out_w);
  const auto in = t.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto [sy, sx] = src(y, x);
        out[(k * out_h + y) * out_w + x] = in[(k * h + sy) * w + sx];
      }
  Shape shape = t.ndim() == 2 ? Shape{out_h, out_w} : Shape{c, out_h, out_w};
  return Tensor(std::move(shape), std::move(out));
}

Tensor crop(const Tensor& t, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  return remap(t, h, w, [=](std::size_t y, std::size_t x) { return std::pair{y0 + y, x0 + x}; });
}

// Netpbm header: magic, width, height, maxval, then one whitespace byte.
struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& is, const fs::path& path) {
  PnmHeader h;
  auto token = [&]() {
    std::string tok;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    if (tok.empty()) throw FormatError(path.string() + ": truncated header");
    return tok;
  };
  auto number = [&]() {
    const std::string tok = token();
    if (!std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
      throw FormatError(path.string() + ": malformed header field '" + tok + "'");
    }
    return static_cast<std::size_t>(std::stoull(tok));
  };
  h.magic = token();
  h.width = number();
  h.height = number();
  h.maxval = number();
  return h;
}

void write_pnm(const fs::path& path, const char* magic, const Tensor& t, std::size_t channels, std::size_t h,
               std::size_t w) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << magic << "\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(channels * h * w);
  const auto v = t.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const float f = std::clamp(v[(c * h + y) * w + x], 0.0f, 1.0f);
        bytes[(y * w + x) * channels + c] = static_cast<unsigned char>(std::lround(f * 255.0f));
      }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("write failed: " + path.string());
}

}  // namespace

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw FormatError("unknown split '" + name + "'");
}

double Sample::prevalence() const {
  double pos = 0.0;
  for (float v : mask.data()) pos += v;
  return mask.numel() ? pos / static_cast<double>(mask.numel()) : 0.0;
}

Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t height, std::size_t width,
                       const VesselStyle& style) {
  if (height == 0 || width == 0) throw ValueError("generate: empty image size");
  if (style.min_levels < 1 || style.max_levels < style.min_levels) throw ValueError("generate: bad level range");
  Rng rng(seed, index);
  const float size = static_cast<float>(std::min(height, width));
  const float scale = size / 64.0f;
  const Vec2 centre{static_cast<float>(width) / 2 + rng.uniform(-1.0f, 1.0f) * scale,
                    static_cast<float>(height) / 2 + rng.uniform(-1.0f, 1.0f) * scale};
  const float radius = 0.48f * size;

  // Optic disc somewhere off-centre; vessels radiate from it.
  const float disc_angle = rng.uniform(0.0f, 2.0f * std::numbers::pi_v<float>);
  const float disc_r = rng.uniform(0.15f, 0.35f) * radius;
  const Vec2 disc{centre.x + disc_r * std::cos(disc_angle), centre.y + disc_r * std::sin(disc_angle)};

  std::vector<Stroke> strokes;
  for (int root = 0; root < style.roots; ++root) {
    const int levels = static_cast<int>(rng.uniform_int(style.min_levels, style.max_levels));
    const float base = disc_angle + std::numbers::pi_v<float> +
                       (static_cast<float>(root) - 0.5f * static_cast<float>(style.roots - 1)) * 1.6f;
    const float angle = base + rng.uniform(-0.5f, 0.5f);
    const float length = rng.uniform(0.3f, 0.45f) * radius;
    grow(strokes, disc, angle, length, style.root_width * scale * rng.uniform(0.85f, 1.15f), 0, levels, style, rng);
  }

  const std::size_t hw = height * width;
  std::vector<float> coverage(hw, 0.0f);
  for (const Stroke& s : strokes) {
    const float half = 0.5f * s.width;
    float x0 = s.pts[0].x, x1 = x0, y0 = s.pts[0].y, y1 = y0;
    for (const Vec2& p : s.pts) {
      x0 = std::min(x0, p.x), x1 = std::max(x1, p.x), y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
    }
    const auto lo = [&](float v) { return static_cast<long>(std::floor(v - half - 1)); };
    const auto hi = [&](float v) { return static_cast<long>(std::ceil(v + half + 1)); };
    for (long y = std::max(0L, lo(y0)); y <= std::min(static_cast<long>(height) - 1, hi(y1)); ++y) {
      for (long x = std::max(0L, lo(x0)); x <= std::min(static_cast<long>(width) - 1, hi(x1)); ++x) {
        const Vec2 p{static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f};
        float d = std::numeric_limits<float>::max();
        for (std::size_t i = 0; i + 1 < s.pts.size(); ++i) d = std::min(d, segment_distance(p, s.pts[i], s.pts[i + 1]));
        const float cov = std::clamp(half + 0.5f - d, 0.0f, 1.0f);
        float& c = coverage[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)];
        c = std::max(c, cov);
      }
    }
  }

  const std::vector<float> noise = smooth_noise(height, width, 4, rng);
  const float brightness = rng.uniform(0.8f, 1.1f);
  const std::array<float, 3> tint = {0.62f * brightness, 0.30f * brightness, 0.13f * brightness};
  const float disc_sigma = 0.07f * size;

  std::vector<float> img(3 * hw), mask(hw);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t i = y * width + x;
      const float px = static_cast<float>(x) + 0.5f, py = static_cast<float>(y) + 0.5f;
      const float rr = std::hypot(px - centre.x, py - centre.y) / radius;
      const bool inside = rr <= 1.0f;
      const float cov = inside ? coverage[i] : 0.0f;
      mask[i] = cov >= 0.5f ? 1.0f : 0.0f;
      const float dd = std::hypot(px - disc.x, py - disc.y);
      const float glow = 0.35f * std::exp(-dd * dd / (2 * disc_sigma * disc_sigma));
      for (std::size_t c = 0; c < 3; ++c) {
        float v = 0.02f;
        if (inside) {
          v = tint[c] * (1.0f - 0.35f * rr * rr) * (1.0f + style.noise_amplitude * noise[i]) + glow;
          v *= 1.0f - style.vessel_contrast * cov;
        }
        v += style.pixel_noise * rng.normal();
        img[c * hw + i] = quantize(v);
      }
    }
  }
  Sample s;
  s.image = Tensor({3, height, width}, std::move(img));
  s.mask = Tensor({height, width}, std::move(mask));
  s.id = "s" + std::to_string(index);
  return s;
}

SplitCounts split_counts(std::size_t n) {
  SplitCounts c;
  c.val = static_cast<std::size_t>(std::round(0.2 * static_cast<double>(n)));
  c.test = static_cast<std::size_t>(std::round(0.1 * static_cast<double>(n)));
  if (c.val + c.test > n) c.test = n - c.val;
  c.train = n - c.val - c.test;
  return c;
}

std::vector<Sample> generate(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width,
                             const VesselStyle& style) {
  const SplitCounts counts = split_counts(n);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = generate_sample(seed, i, height, width, style);
    s.split = i < counts.train ? Split::Train : i < counts.train + counts.val ? Split::Val : Split::Test;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const Sample*> select_split(const std::vector<Sample>& data, Split split) {
  std::vector<const Sample*> out;
  for (const auto& s : data)
    if (s.split == split) out.push_back(&s);
  return out;
}

std::vector<Sample> quadrant_split(const Sample& sample) {
  const auto [c, h2, w2] = plane_dims(sample.image);
  (void)c;
  if (h2 % 2 || w2 % 2) throw ShapeError("quadrant_split: odd image extent");
  if (sample.mask.shape() != Shape{h2, w2}) throw ShapeError("quadrant_split: mask/image mismatch");
  const std::size_t h = h2 / 2, w = w2 / 2;
  std::vector<Sample> out;
  for (std::size_t q = 0; q < 4; ++q) {
    const std::size_t y0 = (q / 2) * h, x0 = (q % 2) * w;
    Sample s;
    s.image = crop(sample.image, y0, x0, h, w);
    s.mask = crop(sample.mask, y0, x0, h, w);
    s.id = sample.id + "_q" + std::to_string(q);
    s.split = sample.split;
    out.push_back(std::move(s));
  }
  return out;
}

Sample reassemble_quadrants(const std::vector<Sample>& quadrants) {
  if (quadrants.size() != 4) throw ValueError("reassemble_quadrants: need 4 quadrants");
  const auto [c, h, w] = plane_dims(quadrants[0].image);
  auto join = [&](auto get, std::size_t channels, bool planar) {
    std::vector<float> out(channels * 4 * h * w);
    for (std::size_t q = 0; q < 4; ++q) {
      const auto v = get(quadrants[q]).data();
      const std::size_t y0 = (q / 2) * h, x0 = (q % 2) * w;
      for (std::size_t k = 0; k < channels; ++k)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) out[(k * 2 * h + y0 + y) * 2 * w + x0 + x] = v[(k * h + y) * w + x];
    }
    Shape shape = planar ? Shape{channels, 2 * h, 2 * w} : Shape{2 * h, 2 * w};
    return Tensor(std::move(shape), std::move(out));
  };
  Sample s;
  s.image = join([](const Sample& q) -> const Tensor& { return q.image; }, c, true);
  s.mask = join([](const Sample& q) -> const Tensor& { return q.mask; }, 1, false);
  s.id = quadrants[0].id;
  s.split = quadrants[0].split;
  return s;
}

Tensor hflip(const Tensor& t) {
  require_planes(t, "hflip");
  const auto [c, h, w] = plane_dims(t);
  (void)c;
  return remap(t, h, w, [w = w](std::size_t y, std::size_t x) { return std::pair{y, w - 1 - x}; });
}

Tensor vflip(const Tensor& t) {
  require_planes(t, "vflip");
  const auto [c, h, w] = plane_dims(t);
  (void)c;
  return remap(t, h, w, [h = h](std::size_t y, std::size_t x) { return std::pair{h - 1 - y, x}; });
}

Tensor rot90(const Tensor& t, int k) {
  require_planes(t, "rot90");
  k = ((k % 4) + 4) % 4;
  const auto [c, h, w] = plane_dims(t);
  (void)c;
  switch (k) {
    case 0: return t.clone();
    case 1:  // out[y][x] = in[x][w-1-y], out is w × h
      return remap(t, w, h, [w = w](std::size_t y, std::size_t x) { return std::pair{x, w - 1 - y}; });
    case 2: return remap(t, h, w, [h = h, w = w](std::size_t y, std::size_t x) { return std::pair{h - 1 - y, w - 1 - x}; });
    default:  // out[y][x] = in[h-1-x][y]
      return remap(t, w, h, [h = h](std::size_t y, std::size_t x) { return std::pair{h - 1 - x, y}; });
  }
}

Sample augment(const Sample& sample, Rng& rng, const AugmentOptions& options) {
  Sample s = sample;
  if (rng.bernoulli(options.flip_p)) {
    s.image = hflip(s.image);
    s.mask = hflip(s.mask);
  }
  if (rng.bernoulli(options.flip_p)) {
    s.image = vflip(s.image);
    s.mask = vflip(s.mask);
  }
  if (rng.bernoulli(options.rotate_p)) {
    const bool square = s.mask.dim(0) == s.mask.dim(1);
    const int k = square ? static_cast<int>(rng.uniform_int(1, 3)) : 2;
    s.image = rot90(s.image, k);
    s.mask = rot90(s.mask, k);
  }
  if (options.jitter > 0.0f) {
    const float brightness = rng.uniform(-options.jitter, options.jitter);
    const float contrast = 1.0f + rng.uniform(-options.jitter, options.jitter);
    std::vector<float> v = s.image.to_vector();
    for (auto& x : v) x = std::clamp((x - 0.5f) * contrast + 0.5f + brightness, 0.0f, 1.0f);
    s.image = Tensor(s.image.shape(), std::move(v));
  }
  return s;
}

Tensor normalize(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("normalize: expected [3×H×W]");
  const std::size_t hw = image.dim(1) * image.dim(2);
  std::vector<float> v = image.to_vector();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) v[c * hw + i] = (v[c * hw + i] - kMean[c]) / kStd[c];
  return Tensor(image.shape(), std::move(v));
}

Tensor denormalize(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("denormalize: expected [3×H×W]");
  const std::size_t hw = image.dim(1) * image.dim(2);
  std::vector<float> v = image.to_vector();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) v[c * hw + i] = v[c * hw + i] * kStd[c] + kMean[c];
  return Tensor(image.shape(), std::move(v));
}

void write_ppm(const fs::path& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected [3×H×W]");
  write_pnm(path, "P6", image, 3, image.dim(1), image.dim(2));
}

void write_pgm(const fs::path& path, const Tensor& plane) {
  if (plane.ndim() != 2) throw ShapeError("write_pgm: expected [H×W]");
  write_pnm(path, "P5", plane, 1, plane.dim(0), plane.dim(1));
}

Tensor load_raster(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() == 4 && std::equal(magic, magic + 4, rten::kMagic)) {
    is.seekg(0);
    return rten::read(is);
  }
  is.clear();
  is.seekg(0);
  const PnmHeader h = read_pnm_header(is, path);
  std::size_t channels = 0;
  if (h.magic == "P6") channels = 3;
  else if (h.magic == "P5") channels = 1;
  else throw FormatError(path.string() + ": unsupported format '" + h.magic + "'");
  if (h.maxval != 255) throw FormatError(path.string() + ": maxval " + std::to_string(h.maxval) + " (only 255 supported)");
  if (h.width == 0 || h.height == 0) throw FormatError(path.string() + ": empty image");
  std::vector<unsigned char> bytes(channels * h.width * h.height);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size()) throw FormatError(path.string() + ": truncated payload");
  const std::size_t hw = h.width * h.height;
  std::vector<float> v(channels * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < channels; ++c) v[c * hw + i] = static_cast<float>(bytes[i * channels + c]) / 255.0f;
  if (channels == 1) return Tensor({h.height, h.width}, std::move(v));
  return Tensor({3, h.height, h.width}, std::move(v));
}

Tensor load_mask(const fs::path& path) {
  const Tensor raw = load_raster(path);
  if (raw.ndim() != 2) throw FormatError(path.string() + ": mask must be single-channel");
  std::vector<float> v = raw.to_vector();
  for (auto& x : v) x = x >= 128.0f / 255.0f ? 1.0f : 0.0f;
  return Tensor(raw.shape(), std::move(v));
}

void save_dataset(const fs::path& root, const std::vector<Sample>& data) {
  fs::create_directories(root);
  std::ofstream manifest(root / "manifest.tsv");
  if (!manifest) throw FormatError("cannot write manifest in " + root.string());
  manifest << "id\tsplit\tprevalence\n";
  for (const Sample& s : data) {
    const fs::path dir = root / split_name(s.split);
    write_ppm(dir / (s.id + ".ppm"), s.image);
    write_pgm(dir / (s.id + ".mask.pgm"), s.mask);
    std::ostringstream prev;
    prev.precision(6);
    prev << std::fixed << s.prevalence();
    manifest << s.id << '\t' << split_name(s.split) << '\t' << prev.str() << '\n';
  }
}

std::vector<Sample> load_dataset(const fs::path& root) {
  std::ifstream manifest(root / "manifest.tsv");
  if (!manifest) throw FormatError("missing manifest.tsv in " + root.string());
  std::string line;
  std::getline(manifest, line);
  if (line.rfind("id\tsplit", 0) != 0) throw FormatError("manifest.tsv: bad header");
  std::vector<Sample> out;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, split;
    if (!std::getline(fields, id, '\t') || !std::getline(fields, split, '\t')) {
      throw FormatError("manifest.tsv: malformed line '" + line + "'");
    }
    Sample s;
    s.id = id;
    s.split = parse_split(split);
    const fs::path dir = root / split;
    s.image = load_raster(dir / (id + ".ppm"));
    s.mask = load_mask(dir / (id + ".mask.pgm"));
    if (s.image.ndim() != 3 || s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1)) {
      throw FormatError(id + ": image and mask sizes differ");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace vitprune
