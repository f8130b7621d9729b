#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vitprune/data.hpp"
#include "vitprune/errors.hpp"

using namespace vitprune;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vitprune_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Generator, Deterministic) {
  const Sample a = generate_sample(9, 3, 64, 64), b = generate_sample(9, 3, 64, 64);
  EXPECT_EQ(a.image.to_vector(), b.image.to_vector());
  EXPECT_EQ(a.mask.to_vector(), b.mask.to_vector());
  EXPECT_NE(a.mask.to_vector(), generate_sample(9, 4, 64, 64).mask.to_vector());
  EXPECT_NE(a.mask.to_vector(), generate_sample(10, 3, 64, 64).mask.to_vector());
}

TEST(Generator, PrevalenceInRange) {
  for (std::size_t i = 0; i < 100; ++i) {
    const double p = generate_sample(1234, i, 64, 64).prevalence();
    EXPECT_GE(p, 0.02) << i;
    EXPECT_LE(p, 0.20) << i;
  }
}

TEST(Generator, MaskBinaryAndInsideFundus) {
  const Sample s = generate_sample(5, 0, 64, 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const float m = s.mask.at(y * 64 + x);
      ASSERT_TRUE(m == 0.0f || m == 1.0f);
      if (m == 0.0f) continue;
      const double dx = x + 0.5 - 32.0, dy = y + 0.5 - 32.0;
      EXPECT_LE(std::sqrt(dx * dx + dy * dy), 0.48 * 64 + 1.0);
    }
  for (float v : s.image.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Splits, CountsAndOrder) {
  const SplitCounts c = split_counts(256);
  EXPECT_EQ(c.train, 179u);
  EXPECT_EQ(c.val, 51u);
  EXPECT_EQ(c.test, 26u);
  const auto data = generate(1, 20, 16, 16);
  EXPECT_EQ(select_split(data, Split::Train).size(), 14u);
  EXPECT_EQ(select_split(data, Split::Val).size(), 4u);
  EXPECT_EQ(select_split(data, Split::Test).size(), 2u);
  EXPECT_EQ(data[13].split, Split::Train);
  EXPECT_EQ(data[14].split, Split::Val);
  EXPECT_EQ(data[19].split, Split::Test);
  EXPECT_EQ(parse_split("val"), Split::Val);
  EXPECT_THROW(parse_split("dev"), FormatError);
}

TEST(Quadrants, ReassembleBitwise) {
  const Sample s = generate_sample(2, 0, 64, 64);
  const auto q = quadrant_split(s);
  ASSERT_EQ(q.size(), 4u);
  double total = 0.0;
  for (const auto& part : q) {
    EXPECT_EQ(part.mask.shape(), (Shape{32, 32}));
    for (float v : part.mask.data()) total += v;
  }
  double whole = 0.0;
  for (float v : s.mask.data()) whole += v;
  EXPECT_EQ(total, whole);
  const Sample r = reassemble_quadrants(q);
  EXPECT_EQ(r.image.to_vector(), s.image.to_vector());
  EXPECT_EQ(r.mask.to_vector(), s.mask.to_vector());
}

TEST(Augment, FlipsAndIdentity) {
  const Sample s = generate_sample(3, 0, 32, 32);
  EXPECT_EQ(hflip(hflip(s.image)).to_vector(), s.image.to_vector());
  EXPECT_EQ(vflip(vflip(s.mask)).to_vector(), s.mask.to_vector());
  EXPECT_EQ(rot90(rot90(s.image, 1), 3).to_vector(), s.image.to_vector());
  Rng rng(4);
  const Sample same = augment(s, rng, AugmentOptions{0.0f, 0.0f, 0.0f});
  EXPECT_EQ(same.image.to_vector(), s.image.to_vector());
  EXPECT_EQ(same.mask.to_vector(), s.mask.to_vector());
  for (int i = 0; i < 30; ++i) {
    const Sample a = augment(s, rng);
    for (float m : a.mask.data()) ASSERT_TRUE(m == 0.0f || m == 1.0f);
    for (float v : a.image.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, Rot90MovesCorner) {
  Tensor t({2, 2}, {1, 2, 3, 4});
  // counter-clockwise: the top-right value moves to the top-left
  EXPECT_EQ(rot90(t, 1).to_vector(), (std::vector<float>{2, 4, 1, 3}));
}

TEST(Normalize, MeanMapsToZeroAndRoundTrips) {
  std::vector<float> v(3 * 4);
  const float mean[3] = {0.485f, 0.456f, 0.406f};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i) v[c * 4 + i] = mean[c];
  const Tensor z = normalize(Tensor({3, 2, 2}, v));
  for (float x : z.data()) EXPECT_NEAR(x, 0.0f, 1e-7f);
  const Sample s = generate_sample(5, 1, 16, 16);
  const Tensor back = denormalize(normalize(s.image));
  for (std::size_t i = 0; i < back.numel(); ++i) EXPECT_NEAR(back.at(i), s.image.at(i), 1e-6f);
}

TEST(Netpbm, RoundTripAndRejects) {
  const fs::path dir = scratch("pnm");
  Rng rng(6);
  std::vector<float> img(3 * 5 * 7), plane(5 * 7);
  for (auto& v : img) v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  for (auto& v : plane) v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  write_ppm(dir / "a.ppm", Tensor({3, 5, 7}, img));
  write_pgm(dir / "a.pgm", Tensor({5, 7}, plane));
  EXPECT_EQ(load_raster(dir / "a.ppm").to_vector(), img);
  EXPECT_EQ(load_raster(dir / "a.pgm").to_vector(), plane);
  const Tensor mask = load_mask(dir / "a.pgm");
  for (std::size_t i = 0; i < plane.size(); ++i)
    EXPECT_EQ(mask.at(i), std::lround(plane[i] * 255.0f) >= 128 ? 1.0f : 0.0f);

  {
    std::ofstream os(dir / "bad.pgm", std::ios::binary);
    os << "P5\n2 1\n65535\n";
    os.write("\0\0\0\0", 4);
  }
  EXPECT_THROW(load_raster(dir / "bad.pgm"), FormatError);
  {
    std::ofstream os(dir / "short.ppm", std::ios::binary);
    os << "P6\n4 4\n255\n";
    os.write("abc", 3);
  }
  EXPECT_THROW(load_raster(dir / "short.ppm"), FormatError);
  fs::remove_all(dir);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const fs::path dir = scratch("ds");
  const auto data = generate(8, 10, 16, 16);
  save_dataset(dir, data);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].split, data[i].split);
    EXPECT_EQ(back[i].image.to_vector(), data[i].image.to_vector());
    EXPECT_EQ(back[i].mask.to_vector(), data[i].mask.to_vector());
  }
  fs::remove_all(dir);
}
