#include "vitprune/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

#include "vitprune/errors.hpp"

namespace vitprune::ops {

using detail::make_result;
using detail::Node;

namespace {

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0f) {
      for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, 0.0f);
    }
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void require_2d(const Tensor& x, const char* op) {
  if (!x.defined() || x.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + (x.defined() ? shape_str(x.shape()) : "none"));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

bool wants(const Node& parent) { return parent.requires_grad; }

void validate_index(std::span<const std::size_t> idx, std::size_t n, const char* op) {
  std::vector<char> seen(n, 0);
  for (std::size_t i : idx) {
    if (i >= n) throw IndexError(std::string(op) + ": index " + std::to_string(i) + " out of range " + std::to_string(n));
    if (seen[i]) throw IndexError(std::string(op) + ": duplicate index " + std::to_string(i));
    seen[i] = 1;
  }
}

// exp and erf to about 1 ulp in float, written branch-free so the loops
// below vectorize. Inputs under -87 give exactly 0. Kept free of std::
// calls so they inline into the AVX2 clones.
[[gnu::always_inline]] inline float exp_approx(float x) {
  float xc = x < -87.0f ? -87.0f : x;
  xc = xc > 88.0f ? 88.0f : xc;
  const float n = (xc * 1.44269504f + 12582912.0f) - 12582912.0f;
  float r = xc - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const float two_n = __builtin_bit_cast(float, static_cast<std::int32_t>(n + 127.0f) << 23);
  const float keep = x >= -87.0f;
  return p * two_n * keep;
}

[[gnu::always_inline]] inline float erf_approx(float a) {
  const float t = __builtin_fabsf(a), s = a * a;
  // tail: 1 - exp(poly(t))
  float r = -1.72853470e-5f * t + 3.83197126e-4f;
  const float u = -3.88396438e-3f * t + 2.42546219e-2f;
  r = r * s + u;
  r = r * t - 1.06777877e-1f;
  r = r * t - 6.34846687e-1f;
  r = r * t - 1.28717512e-1f;
  r = r * t - t;
  const float tail = __builtin_copysignf(1.0f - exp_approx(r), a);
  float q = -5.96761703e-4f;
  q = q * s + 4.99119423e-3f;
  q = q * s - 2.67681349e-2f;
  q = q * s + 1.12819925e-1f;
  q = q * s - 3.76125336e-1f;
  q = q * s + 1.28379166e-1f;
  q = q * a + a;
  const float w = t > 0.927734375f;
  return w * tail + (1.0f - w) * q;
}

#define VITPRUNE_CLONES __attribute__((target_clones("avx2", "default")))

// Softmax of one row with an optional multiplicative mask, see softmax_row.
// Returns false when every column is masked out.
VITPRUNE_CLONES bool softmax_kernel(const float* a, const float* m, std::size_t n, float* prob, float* ratio) {
  // Eight independent lanes keep the reductions vectorizable.
  float mx8[8];
  for (std::size_t k = 0; k < 8; ++k) mx8[k] = -INFINITY;
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t k = 0; k < 8; ++k) {
      const float v = (!m || m[j + k] != 0.0f) ? a[j + k] : -INFINITY;
      mx8[k] = v > mx8[k] ? v : mx8[k];
    }
  }
  for (; j < n; ++j) {
    const float v = (!m || m[j] != 0.0f) ? a[j] : -INFINITY;
    mx8[0] = v > mx8[0] ? v : mx8[0];
  }
  float mx = mx8[0];
  for (std::size_t k = 1; k < 8; ++k) mx = mx8[k] > mx ? mx8[k] : mx;
  if (mx == -INFINITY) return false;
  // Masked columns may sit above the unmasked max; cap the exponent so the
  // mask gradient stays finite.
  float* e = ratio ? ratio : prob;
  for (j = 0; j < n; ++j) {
    const float d = a[j] - mx;
    e[j] = exp_approx(d < 60.0f ? d : 60.0f);
  }
  if (m)
    for (j = 0; j < n; ++j) prob[j] = e[j] * m[j];
  double z8[8] = {};
  for (j = 0; j + 8 <= n; j += 8)
    for (std::size_t k = 0; k < 8; ++k) z8[k] += prob[j + k];
  for (; j < n; ++j) z8[0] += prob[j];
  double z = 0.0;
  for (std::size_t k = 0; k < 8; ++k) z += z8[k];
  const float inv = static_cast<float>(1.0 / z);
  for (j = 0; j < n; ++j) prob[j] *= inv;
  if (ratio)
    for (j = 0; j < n; ++j) ratio[j] *= inv;
  return true;
}

VITPRUNE_CLONES void gelu_forward(const float* x, std::size_t n, float* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5f * x[i] * (1.0f + erf_approx(x[i] * kInvSqrt2));
}

VITPRUNE_CLONES void gelu_backward(const float* x, const float* g, std::size_t n, float* gx) {
  for (std::size_t i = 0; i < n; ++i) {
    const float u = x[i];
    const float cdf = 0.5f * (1.0f + erf_approx(u * kInvSqrt2));
    const float pdf = kInvSqrt2Pi * exp_approx(-0.5f * u * u);
    gx[i] += g[i] * (cdf + u * pdf);
  }
}

#undef VITPRUNE_CLONES

// One softmax row with an optional multiplicative mask. Writes probabilities
// into `prob`; when `ratio` is non-null also writes exp(a_j - max)/Z for every
// column, which is the derivative of prob_j with respect to mask_j.
void softmax_row(const float* a, const float* m, std::size_t n, float* prob, float* ratio, const char* op) {
  if (!softmax_kernel(a, m, n, prob, ratio)) {
    throw NumericError(std::string(op) + ": degenerate row with an all-zero mask");
  }
}

// Given dProb for one row, write dLogits and accumulate dMask.
void softmax_row_backward(const float* prob, const float* ratio, const float* dprob, std::size_t n, float* dlogits,
                          float* dmask) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(dprob[j]) * prob[j];
  const float fdot = static_cast<float>(dot);
  for (std::size_t j = 0; j < n; ++j) {
    const float centred = dprob[j] - fdot;
    dlogits[j] = prob[j] * centred;
    if (dmask) dmask[j] += centred * ratio[j];
  }
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  std::vector<float> out(m * p);
  gemm(false, false, m, p, k, 1.0f, a.data().data(), k, b.data().data(), p, 0.0f, out.data(), p);
  return make_result({m, p}, std::move(out), {&a, &b}, "matmul", [m, k, p](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) gemm(false, true, m, k, p, 1.0f, self.grad.data(), p, pb.data.data(), p, 1.0f, pa.ensure_grad().data(), k);
    if (wants(pb)) gemm(true, false, k, p, m, 1.0f, pa.data.data(), k, self.grad.data(), p, 1.0f, pb.ensure_grad().data(), p);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  require_2d(x, "linear");
  require_2d(weight, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  if (weight.dim(0) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " vs out " + std::to_string(out_dim));
  }
  std::vector<float> out(n * out_dim);
  if (bias) {
    const auto bv = bias->data();
    for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * out_dim);
  }
  gemm(false, false, n, out_dim, in, 1.0f, x.data().data(), in, weight.data().data(), out_dim, bias ? 1.0f : 0.0f,
       out.data(), out_dim);
  std::vector<const Tensor*> inputs{&x, &weight};
  if (bias) inputs.push_back(bias);
  return make_result({n, out_dim}, std::move(out), inputs, "linear", [n, in, out_dim](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const float* g = self.grad.data();
    if (wants(px)) gemm(false, true, n, in, out_dim, 1.0f, g, out_dim, pw.data.data(), out_dim, 1.0f, px.ensure_grad().data(), in);
    if (wants(pw)) gemm(true, false, in, out_dim, n, 1.0f, px.data.data(), in, g, out_dim, 1.0f, pw.ensure_grad().data(), out_dim);
    if (self.parents.size() > 2 && wants(*self.parents[2])) {
      auto& gb = self.parents[2]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<float> out(r * c);
  const auto v = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return make_result({c, r}, std::move(out), {&x}, "transpose", [r, c](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& gx = px.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return make_result(std::move(shape), x.to_vector(), {&x}, "reshape", [](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& gx = px.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<float> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "add", [](Node& self) {
    for (auto& parent : self.parents) {
      if (!wants(*parent)) continue;
      auto& g = parent->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<float> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "sub", [](Node& self) {
    if (wants(*self.parents[0])) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(*self.parents[1])) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<float> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "mul", [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (wants(pb)) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same(a, b, "div");
  std::vector<float> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "div", [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.data[i];
    }
    if (wants(pb)) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
    }
  });
}

Tensor scale(const Tensor& x, float s) {
  std::vector<float> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * s;
  return make_result(x.shape(), std::move(out), {&x}, "scale", [s](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& x, float s) {
  std::vector<float> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + s;
  return make_result(x.shape(), std::move(out), {&x}, "add_scalar", [](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add_row(const Tensor& x, const Tensor& v) {
  require_2d(x, "add_row");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (v.ndim() != 1 || v.dim(0) != d) throw ShapeError("add_row: vector " + shape_str(v.shape()) + " vs " + shape_str(x.shape()));
  std::vector<float> out(x.numel());
  const auto xv = x.data(), vv = v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + vv[j];
  return make_result(x.shape(), std::move(out), {&x, &v}, "add_row", [n, d](Node& self) {
    if (wants(*self.parents[0])) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(*self.parents[1])) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    }
  });
}

Tensor mul_row(const Tensor& x, const Tensor& v) {
  require_2d(x, "mul_row");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (v.ndim() != 1 || v.dim(0) != d) throw ShapeError("mul_row: vector " + shape_str(v.shape()) + " vs " + shape_str(x.shape()));
  std::vector<float> out(x.numel());
  const auto xv = x.data(), vv = v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * vv[j];
  return make_result(x.shape(), std::move(out), {&x, &v}, "mul_row", [n, d](Node& self) {
    Node& px = *self.parents[0];
    Node& pv = *self.parents[1];
    if (wants(px)) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j] * pv.data[j];
    }
    if (wants(pv)) {
      auto& g = pv.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j] * px.data[i * d + j];
    }
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<float> out(x.numel());
  gelu_forward(x.data().data(), out.size(), out.data());
  return make_result(x.shape(), std::move(out), {&x}, "gelu", [](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& g = px.ensure_grad();
    gelu_backward(px.data.data(), self.grad.data(), g.size(), g.data());
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f / (1.0f + std::exp(-v[i]));
  return make_result(x.shape(), std::move(out), {&x}, "sigmoid", [](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float s = self.data[i];
      g[i] += self.grad[i] * s * (1.0f - s);
    }
  });
}

// ---- normalisation --------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_2d(x, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) throw ShapeError("layer_norm: affine size mismatch");
  std::vector<float> out(x.numel());
  std::vector<float> xhat(x.numel());
  std::vector<float> rstd(n);
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[i] = static_cast<float>(1.0 / std::sqrt(var + eps));
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>(row[j] - mu) * rstd[i];
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
                     [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const float* g = self.grad.data();
                       if (wants(pg)) {
                         auto& gg = pg.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                       }
                       if (wants(pb)) {
                         auto& gb = pb.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                       }
                       if (!wants(px)) return;
                       auto& gx = px.ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = static_cast<double>(g[i * d + j]) * pg.data[j];
                           mean_dh += dh;
                           mean_dh_h += dh * xhat[i * d + j];
                         }
                         mean_dh /= static_cast<double>(d);
                         mean_dh_h /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = static_cast<double>(g[i * d + j]) * pg.data[j];
                           gx[i * d + j] += static_cast<float>(rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h));
                         }
                       }
                     });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  require_2d(x, "rms_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gain.shape() != Shape{d}) throw ShapeError("rms_norm: gain size mismatch");
  std::vector<float> out(x.numel());
  std::vector<float> rinv(n);
  const auto xv = x.data(), gv = gain.data();
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += static_cast<double>(xv[i * d + j]) * xv[i * d + j];
    rinv[i] = static_cast<float>(1.0 / std::sqrt(ms / static_cast<double>(d) + eps));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * rinv[i] * gv[j];
  }
  return make_result(x.shape(), std::move(out), {&x, &gain}, "rms_norm", [n, d, rinv = std::move(rinv)](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    const float* g = self.grad.data();
    if (wants(pg)) {
      auto& gg = pg.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * px.data[i * d + j] * rinv[i];
    }
    if (!wants(px)) return;
    auto& gx = px.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[i * d + j]) * pg.data[j] * px.data[i * d + j];
      const double r = rinv[i];
      const double coef = r * r * r * dot / static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        gx[i * d + j] += static_cast<float>(r * g[i * d + j] * pg.data[j] - coef * px.data[i * d + j]);
      }
    }
  });
}

// ---- softmax / attention --------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  require_2d(logits, "softmax_rows");
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  std::vector<float> out(logits.numel());
  for (std::size_t i = 0; i < r; ++i) softmax_row(logits.data().data() + i * c, nullptr, c, out.data() + i * c, nullptr, "softmax_rows");
  return make_result(logits.shape(), std::move(out), {&logits}, "softmax_rows", [r, c](Node& self) {
    Node& pl = *self.parents[0];
    if (!wants(pl)) return;
    auto& gl = pl.ensure_grad();
    std::vector<float> tmp(c);
    for (std::size_t i = 0; i < r; ++i) {
      softmax_row_backward(self.data.data() + i * c, nullptr, self.grad.data() + i * c, c, tmp.data(), nullptr);
      for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += tmp[j];
    }
  });
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  require_2d(logits, "masked_softmax");
  require_same(logits, mask, "masked_softmax");
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  const bool mask_grad = mask.requires_grad() && grad_enabled();
  std::vector<float> out(logits.numel());
  std::vector<float> ratio(mask_grad ? logits.numel() : 0);
  for (std::size_t i = 0; i < r; ++i) {
    softmax_row(logits.data().data() + i * c, mask.data().data() + i * c, c, out.data() + i * c,
                mask_grad ? ratio.data() + i * c : nullptr, "masked_softmax");
  }
  return make_result(logits.shape(), std::move(out), {&logits, &mask}, "masked_softmax",
                     [r, c, ratio = std::move(ratio)](Node& self) {
                       Node& pl = *self.parents[0];
                       Node& pm = *self.parents[1];
                       float* gm = (wants(pm) && !ratio.empty()) ? pm.ensure_grad().data() : nullptr;
                       std::vector<float> tmp(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         softmax_row_backward(self.data.data() + i * c, gm ? ratio.data() + i * c : nullptr,
                                              self.grad.data() + i * c, c, tmp.data(), gm ? gm + i * c : nullptr);
                         if (wants(pl)) {
                           auto& gl = pl.ensure_grad();
                           for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += tmp[j];
                         }
                       }
                     });
}

Tensor multi_head_attention(const Tensor& qkv, std::size_t heads, const Tensor* mask, std::span<const float> col_bias) {
  require_2d(qkv, "multi_head_attention");
  const std::size_t n = qkv.dim(0);
  if (heads == 0 || qkv.dim(1) % 3 != 0 || (qkv.dim(1) / 3) % heads != 0) {
    throw ShapeError("multi_head_attention: packed width " + std::to_string(qkv.dim(1)) + " incompatible with " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t d = qkv.dim(1) / 3, dk = d / heads, ld = 3 * d;
  if (mask && mask->shape() != Shape{n, n}) {
    throw ShapeError("multi_head_attention: mask " + shape_str(mask->shape()) + " for " + std::to_string(n) + " tokens");
  }
  if (!col_bias.empty() && col_bias.size() != n) throw ShapeError("multi_head_attention: column bias size mismatch");
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dk));
  const bool recording = grad_enabled() && (qkv.requires_grad() || (mask && mask->requires_grad()));
  const bool mask_grad = recording && mask && mask->requires_grad();

  const float* src = qkv.data().data();
  const float* m = mask ? mask->data().data() : nullptr;
  std::vector<float> out(n * d);
  std::vector<float> logits(n * n);
  // Saved per head for backward: probabilities, and exp/Z ratios for the mask.
  // Without a tape the probabilities overwrite the logits in place.
  std::vector<float> probs(recording ? heads * n * n : 0);
  std::vector<float> ratios(mask_grad ? heads * n * n : 0);
  for (std::size_t h = 0; h < heads; ++h) {
    const float* q = src + h * dk;
    const float* k = src + d + h * dk;
    const float* v = src + 2 * d + h * dk;
    gemm(false, true, n, n, dk, scale_factor, q, ld, k, ld, 0.0f, logits.data(), n);
    if (!col_bias.empty()) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) logits[i * n + j] += col_bias[j];
    }
    float* p = recording ? probs.data() + h * n * n : logits.data();
    for (std::size_t i = 0; i < n; ++i) {
      softmax_row(logits.data() + i * n, m ? m + i * n : nullptr, n, p + i * n,
                  mask_grad ? ratios.data() + h * n * n + i * n : nullptr, "multi_head_attention");
    }
    gemm(false, false, n, dk, n, 1.0f, p, n, v, ld, 0.0f, out.data() + h * dk, d);
  }

  std::vector<const Tensor*> inputs{&qkv};
  if (mask) inputs.push_back(mask);
  return make_result({n, d}, std::move(out), inputs, "multi_head_attention",
                     [n, d, dk, ld, heads, scale_factor, probs = std::move(probs), ratios = std::move(ratios)](Node& self) {
                       Node& pqkv = *self.parents[0];
                       Node* pm = self.parents.size() > 1 ? self.parents[1].get() : nullptr;
                       float* gm = (pm && wants(*pm) && !ratios.empty()) ? pm->ensure_grad().data() : nullptr;
                       const bool need_qkv = wants(pqkv);
                       float* gqkv = need_qkv ? pqkv.ensure_grad().data() : nullptr;
                       const float* src = pqkv.data.data();
                       std::vector<float> dprob(n * n), dlogit(n * n);
                       for (std::size_t h = 0; h < heads; ++h) {
                         const float* p = probs.data() + h * n * n;
                         const float* go = self.grad.data() + h * dk;
                         const float* q = src + h * dk;
                         const float* k = src + d + h * dk;
                         const float* v = src + 2 * d + h * dk;
                         gemm(false, true, n, n, dk, 1.0f, go, d, v, ld, 0.0f, dprob.data(), n);
                         for (std::size_t i = 0; i < n; ++i) {
                           softmax_row_backward(p + i * n, gm ? ratios.data() + h * n * n + i * n : nullptr,
                                                dprob.data() + i * n, n, dlogit.data() + i * n, gm ? gm + i * n : nullptr);
                         }
                         if (!need_qkv) continue;
                         gemm(true, false, n, dk, n, 1.0f, p, n, go, d, 1.0f, gqkv + 2 * d + h * dk, ld);
                         gemm(false, false, n, dk, n, scale_factor, dlogit.data(), n, k, ld, 1.0f, gqkv + h * dk, ld);
                         gemm(true, false, n, dk, n, scale_factor, dlogit.data(), n, q, ld, 1.0f, gqkv + d + h * dk, ld);
                       }
                     });
}

// ---- indexing -------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  require_2d(x, "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  validate_index(idx, n, "gather_rows");
  std::vector<float> out(idx.size() * d);
  const auto xv = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(xv.data() + idx[r] * d, d, out.data() + r * d);
  return make_result({idx.size(), d}, std::move(out), {&x}, "gather_rows",
                     [d, rows = std::vector<std::size_t>(idx.begin(), idx.end())](Node& self) {
                       Node& px = *self.parents[0];
                       if (!wants(px)) return;
                       auto& g = px.ensure_grad();
                       for (std::size_t r = 0; r < rows.size(); ++r)
                         for (std::size_t j = 0; j < d; ++j) g[rows[r] * d + j] += self.grad[r * d + j];
                     });
}

Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> idx, const Tensor& base) {
  require_2d(src, "scatter_rows");
  require_2d(base, "scatter_rows");
  const std::size_t n = base.dim(0), d = base.dim(1);
  if (src.dim(1) != d || src.dim(0) != idx.size()) {
    throw ShapeError("scatter_rows: source " + shape_str(src.shape()) + " for " + std::to_string(idx.size()) +
                     " indices into " + shape_str(base.shape()));
  }
  validate_index(idx, n, "scatter_rows");
  std::vector<float> out = base.to_vector();
  const auto sv = src.data();
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(sv.data() + r * d, d, out.data() + idx[r] * d);
  std::vector<char> replaced(n, 0);
  for (std::size_t i : idx) replaced[i] = 1;
  return make_result({n, d}, std::move(out), {&src, &base}, "scatter_rows",
                     [d, rows = std::vector<std::size_t>(idx.begin(), idx.end()), replaced = std::move(replaced)](Node& self) {
                       Node& ps = *self.parents[0];
                       Node& pb = *self.parents[1];
                       if (wants(ps)) {
                         auto& g = ps.ensure_grad();
                         for (std::size_t r = 0; r < rows.size(); ++r)
                           for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[rows[r] * d + j];
                       }
                       if (wants(pb)) {
                         auto& g = pb.ensure_grad();
                         for (std::size_t i = 0; i < replaced.size(); ++i) {
                           if (replaced[i]) continue;
                           for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j];
                         }
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t offset, std::size_t count) {
  require_2d(x, "slice_cols");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (offset + count > c) throw ShapeError("slice_cols: range beyond " + std::to_string(c) + " columns");
  std::vector<float> out(n * count);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.data() + i * c + offset, count, out.data() + i * count);
  return make_result({n, count}, std::move(out), {&x}, "slice_cols", [n, c, offset, count](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + offset + j] += self.grad[i * count + j];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != n) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<float> out(n * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * total + offset);
    offset += w;
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return make_result({n, total}, std::move(out), inputs, "concat_cols", [n, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& pk = *self.parents[k];
      const std::size_t w = widths[k];
      if (wants(pk)) {
        auto& g = pk.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Tensor combine_rows(const Tensor& x, std::span<const RowMix> mixes) {
  require_2d(x, "combine_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<float> out(mixes.size() * d, 0.0f);
  const auto xv = x.data();
  for (std::size_t r = 0; r < mixes.size(); ++r) {
    const auto& mix = mixes[r];
    if (mix.rows.size() != mix.weights.size()) throw ShapeError("combine_rows: rows/weights length mismatch");
    for (std::size_t t = 0; t < mix.rows.size(); ++t) {
      if (mix.rows[t] >= n) throw IndexError("combine_rows: row " + std::to_string(mix.rows[t]) + " out of range");
      const float w = mix.weights[t];
      const float* row = xv.data() + mix.rows[t] * d;
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] += w * row[j];
    }
  }
  return make_result({mixes.size(), d}, std::move(out), {&x}, "combine_rows",
                     [d, mixes = std::vector<RowMix>(mixes.begin(), mixes.end())](Node& self) {
                       Node& px = *self.parents[0];
                       if (!wants(px)) return;
                       auto& g = px.ensure_grad();
                       for (std::size_t r = 0; r < mixes.size(); ++r) {
                         for (std::size_t t = 0; t < mixes[r].rows.size(); ++t) {
                           const float w = mixes[r].weights[t];
                           float* dst = g.data() + mixes[r].rows[t] * d;
                           for (std::size_t j = 0; j < d; ++j) dst[j] += w * self.grad[r * d + j];
                         }
                       }
                     });
}

Index top_k_indices(std::span<const float> scores, std::size_t k) {
  const std::size_t n = scores.size();
  if (k < 1 || k > n) throw ValueError("top_k_indices: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  Index order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), better);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

Index top_k_indices(const Tensor& scores, std::size_t k) { return top_k_indices(scores.data(), k); }

// ---- reductions / losses --------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_result({}, {static_cast<float>(acc)}, {&x}, "sum", [](Node& self) {
    Node& px = *self.parents[0];
    if (!wants(px)) return;
    auto& g = px.ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  require_same(logits, target, "bce_with_logits");
  if (logits.numel() == 0) throw ShapeError("bce_with_logits: empty input");
  const auto lv = logits.data(), tv = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (!(tv[i] >= 0.0f && tv[i] <= 1.0f)) throw ValueError("bce_with_logits: target outside [0, 1]");
    const double x = lv[i];
    acc += std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const std::size_t count = lv.size();
  return make_result({}, {static_cast<float>(acc / static_cast<double>(count))}, {&logits, &target}, "bce_with_logits",
                     [count](Node& self) {
                       Node& pl = *self.parents[0];
                       Node& pt = *self.parents[1];
                       if (!wants(pl)) return;
                       auto& g = pl.ensure_grad();
                       const float s = self.grad[0] / static_cast<float>(count);
                       for (std::size_t i = 0; i < count; ++i) {
                         const float sig = 1.0f / (1.0f + std::exp(-pl.data[i]));
                         g[i] += s * (sig - pt.data[i]);
                       }
                     });
}

// ---- resampling / misc ----------------------------------------------------

namespace {

struct Tap1d {
  std::size_t lo, hi;
  float frac;
};

std::vector<Tap1d> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap1d> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (s < 0.0) s = 0.0;
    auto lo = static_cast<std::size_t>(s);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + (lo < in - 1 ? 1 : 0);
    taps[o] = {lo, hi, static_cast<float>(s - static_cast<double>(lo))};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_2d(x, "bilinear_resize");
  const std::size_t in_h = x.dim(0), in_w = x.dim(1);
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty extent");
  auto ty = bilinear_taps(in_h, out_h);
  auto tx = bilinear_taps(in_w, out_w);
  std::vector<float> out(out_h * out_w);
  const auto v = x.data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& a = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& b = tx[ox];
      const float top = v[a.lo * in_w + b.lo] * (1 - b.frac) + v[a.lo * in_w + b.hi] * b.frac;
      const float bot = v[a.hi * in_w + b.lo] * (1 - b.frac) + v[a.hi * in_w + b.hi] * b.frac;
      out[oy * out_w + ox] = top * (1 - a.frac) + bot * a.frac;
    }
  }
  return make_result({out_h, out_w}, std::move(out), {&x}, "bilinear_resize",
                     [in_w, out_w, ty = std::move(ty), tx = std::move(tx)](Node& self) {
                       Node& px = *self.parents[0];
                       if (!wants(px)) return;
                       auto& g = px.ensure_grad();
                       for (std::size_t oy = 0; oy < ty.size(); ++oy) {
                         const auto& a = ty[oy];
                         for (std::size_t ox = 0; ox < tx.size(); ++ox) {
                           const auto& b = tx[ox];
                           const float go = self.grad[oy * out_w + ox];
                           g[a.lo * in_w + b.lo] += go * (1 - a.frac) * (1 - b.frac);
                           g[a.lo * in_w + b.hi] += go * (1 - a.frac) * b.frac;
                           g[a.hi * in_w + b.lo] += go * a.frac * (1 - b.frac);
                           g[a.hi * in_w + b.hi] += go * a.frac * b.frac;
                         }
                       }
                     });
}

Tensor straight_through(const Tensor& soft, const Tensor& hard) {
  require_same(soft, hard, "straight_through");
  return make_result(soft.shape(), hard.to_vector(), {&soft}, "straight_through", [](Node& self) {
    Node& ps = *self.parents[0];
    if (!wants(ps)) return;
    auto& g = ps.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

}  // namespace vitprune::ops
