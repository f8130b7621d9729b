#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "../support/grad_cases.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/ops.hpp"
#include "vitprune/rng.hpp"
#include "vitprune/rten.hpp"

using namespace vitprune;
namespace vt = vitprune::testing;

namespace {

void expect_near_all(const Tensor& t, std::initializer_list<float> want, float tol) {
  ASSERT_EQ(t.numel(), want.size());
  std::size_t i = 0;
  for (float w : want) EXPECT_NEAR(t.at(i++), w, tol) << "element " << i - 1;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
}

TEST(Tensor, BackwardAccumulatesThroughSharedInput) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor y = ops::sum(ops::add(ops::mul(x, x), x));
  y.backward();
  expect_near_all(Tensor({2}, {x.grad()[0], x.grad()[1]}), {3.0f, 5.0f}, 0.0f);
}

TEST(Tensor, NoGradGuardBuildsNoGraph) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  NoGradGuard g;
  EXPECT_FALSE(ops::scale(x, 2.0f).requires_grad());
}

TEST(Rng, SameSeedAndStreamRepeat) {
  Rng a(7, 3), b(7, 3), c(7, 4);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(Rng(7).fork(5).next_u64(), Rng(7).fork(5).next_u64());
}

TEST(Rng, UniformIntCoversRangeEvenly) {
  Rng r(1);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 50000; ++i) ++hist[static_cast<std::size_t>(r.uniform_int(2, 6) - 2)];
  for (int h : hist) EXPECT_NEAR(h, 10000, 400);
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
  Rng r(2);
  auto s = r.sample_without_replacement(20, 20);
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(s[i], i);
}

TEST(Matmul, Examples) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  expect_near_all(ops::matmul(eye, m), {1, 2, 3, 4}, 0.0f);
  expect_near_all(ops::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})), {11}, 0.0f);
  EXPECT_THROW(ops::matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(MaskedSoftmax, Examples) {
  expect_near_all(ops::masked_softmax(Tensor({1, 3}), Tensor({1, 3}, {1, 0, 1})), {0.5f, 0.0f, 0.5f}, 1e-7f);
  Rng r(3);
  const Tensor a = vt::random_tensor({5, 7}, r, -4, 4, false);
  const Tensor plain = ops::softmax_rows(a);
  const Tensor masked = ops::masked_softmax(a, Tensor::full({5, 7}, 1.0f));
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(plain.at(i), masked.at(i), 1e-6f);
  EXPECT_THROW(ops::masked_softmax(Tensor({2, 2}), Tensor({2, 2}, {1, 1, 0, 0})), NumericError);
}

TEST(MaskedSoftmax, ExtremeLogitsStayFinite) {
  const Tensor p = ops::masked_softmax(Tensor({1, 3}, {1000, 0, -1000}), Tensor({1, 3}, {0, 1, 1}));
  expect_near_all(p, {0.0f, 1.0f, 0.0f}, 1e-7f);
}

TEST(Softmax, MatchesDoubleReference) {
  Rng rng(11);
  // odd width exercises the tail after the 8-wide lanes; spread covers underflow
  const std::size_t r = 6, c = 37;
  const Tensor x = vt::random_tensor({r, c}, rng, -60, 60, false);
  const Tensor p = ops::softmax_rows(x);
  for (std::size_t i = 0; i < r; ++i) {
    float mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x.at(i * c + j));
    // the shifted logit is rounded to float before exp, as in the kernel
    auto e = [&](std::size_t j) { return std::exp(static_cast<double>(x.at(i * c + j) - mx)); };
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += e(j);
    for (std::size_t j = 0; j < c; ++j) {
      const double want = e(j) / z;
      EXPECT_NEAR(p.at(i * c + j), want, 1e-6 * std::max(want, 1e-30) + 1e-37);
    }
  }
}

TEST(Gelu, MatchesErfReference) {
  std::vector<float> v;
  for (float u = -9.0f; u <= 9.0f; u += 0.01f) v.push_back(u);
  const Tensor y = ops::gelu(Tensor({v.size()}, v));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double want = 0.5 * v[i] * (1.0 + std::erf(v[i] / std::sqrt(2.0)));
    EXPECT_NEAR(y.at(i), want, 1e-6 * std::max(1.0, std::abs(want))) << v[i];
  }
}

TEST(LayerNorm, Examples) {
  const Tensor g = Tensor::full({2}, 1.0f), b({2});
  expect_near_all(ops::layer_norm(Tensor({1, 2}, {5, 5}), g, b), {0, 0}, 0.0f);
  const Tensor y = ops::layer_norm(Tensor({1, 2}, {1, 3}), g, b);
  // variance 1, so the eps shrinkage is 1 − 1/√(1 + 1e-5) ≈ 5e-6
  EXPECT_NEAR(y.at(0), -1.0f, 1e-5f);
  EXPECT_NEAR(y.at(1), 1.0f, 1e-5f);
  EXPECT_GT(y.at(0), -1.0f);
}

TEST(GatherScatter, Examples) {
  Tensor x({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  const ops::Index all = {0, 1, 2, 3};
  expect_near_all(ops::gather_rows(x, all), {0, 1, 10, 11, 20, 21, 30, 31}, 0.0f);
  const ops::Index idx = {2, 0};
  expect_near_all(ops::gather_rows(x, idx), {20, 21, 0, 1}, 0.0f);
  const Tensor back = ops::scatter_rows(ops::gather_rows(x, idx), idx, x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.at(i), x.at(i));
  const ops::Index one = {1};
  expect_near_all(ops::scatter_rows(Tensor({1, 2}, {7, 8}), one, Tensor({3, 2})), {0, 0, 7, 8, 0, 0}, 0.0f);
  const ops::Index dup = {1, 1}, oob = {4};
  EXPECT_THROW(ops::gather_rows(x, dup), IndexError);
  EXPECT_THROW(ops::gather_rows(x, oob), IndexError);
  EXPECT_THROW(ops::scatter_rows(Tensor({2, 2}), dup, x), IndexError);
}

TEST(GatherScatter, RandomRoundTrip) {
  Rng r(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = vt::random_tensor({16, 3}, r, -1, 1, false);
    const auto idx = r.sample_without_replacement(16, static_cast<std::size_t>(r.uniform_int(1, 16)));
    const Tensor back = ops::scatter_rows(ops::gather_rows(x, idx), idx, x);
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(back.at(i), x.at(i));
  }
}

TEST(TopK, Examples) {
  EXPECT_EQ(ops::top_k_indices(std::vector<float>{0.1f, 0.9f, 0.5f}, 2), (ops::Index{1, 2}));
  EXPECT_EQ(ops::top_k_indices(std::vector<float>{1, 1, 1, 1}, 2), (ops::Index{0, 1}));
}

TEST(TopK, MatchesSortOracle) {
  Rng r(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> s(100);
    // coarse values so ties are common
    for (auto& v : s) v = static_cast<float>(r.uniform_int(0, 20));
    const auto k = static_cast<std::size_t>(r.uniform_int(0, 100));
    ops::Index order(100);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    ASSERT_EQ(ops::top_k_indices(s, k), order);
  }
}

TEST(Attention, ZeroKeysAverageUnmaskedValues) {
  // qkv rows [q | k | v] with d = 2, one head, K = 0
  Tensor qkv({3, 6}, {1, 2, 0, 0, 1, 2, 3, 4, 0, 0, 3, 4, 5, 6, 0, 0, 5, 6});
  const Tensor mask({3, 3}, {1, 0, 1, 1, 0, 1, 1, 0, 1});
  const Tensor y = ops::multi_head_attention(qkv, 1, &mask);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(y.at(i * 2), 3.0f, 1e-6f);
    EXPECT_NEAR(y.at(i * 2 + 1), 4.0f, 1e-6f);
  }
}

TEST(Rten, RoundTripAndErrors) {
  Rng r(6);
  const Tensor t = vt::random_tensor({3, 4, 2}, r, -5, 5, false);
  const Tensor u = rten::decode(rten::encode(t));
  EXPECT_EQ(u.shape(), t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(u.at(i), t.at(i));
  auto bytes = rten::encode(t);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(rten::decode(bytes), FormatError);
  bytes = rten::encode(t);
  bytes[0] = 'X';
  EXPECT_THROW(rten::decode(bytes), FormatError);
}

TEST(Ops, NonFiniteOutputRaises) {
  EXPECT_THROW(ops::div(Tensor::full({1}, 1.0f), Tensor::full({1}, 0.0f)), NumericError);
}

class GradCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradCheck, MatchesFiniteDifferences) {
  const auto cases = vt::grad_cases();
  const auto& c = cases[GetParam()];
  Rng rng(100 + GetParam());
  const auto inputs = c.inputs(rng);
  const auto res = vt::grad_check(c.fn, inputs, rng);
  EXPECT_EQ(res.points, 10u) << c.name;
  EXPECT_LT(res.max_rel_err, 1e-3) << c.name << ": " << res.worst;
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradCheck, ::testing::Range<std::size_t>(0, vt::grad_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           std::string n = vt::grad_cases()[info.param].name;
                           for (char& ch : n)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return n;
                         });
