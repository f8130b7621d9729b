#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vitprune {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool retain_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents. Set only on recorded ops.
  std::function<void(Node&)> backward_fn;

  std::vector<float>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
  }
  bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

/// Dense row-major f32 tensor handle with reverse-mode autodiff.
///
/// Copies share storage. Every op records a closure on the result node when
/// gradient mode is on and an input requires grad; `backward()` walks the
/// recorded graph once and then releases it, so each forward pass builds a
/// fresh graph. Leaf gradients accumulate until `zero_grad()`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<float> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<float>(values), requires_grad) {}

  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  // Writable view through the shared handle. Meant for leaves (parameters,
  // freshly built inputs).
  std::span<float> data_mut() const;
  float at(std::size_t flat) const { return data()[flat]; }
  float item() const;
  std::vector<float> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  Tensor& retain_grad();
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> grad_mut() const;
  void zero_grad() const;

  /// Seeds d(self)/d(self) = 1; requires a single-element tensor.
  void backward() const;
  /// Seeds an arbitrary upstream gradient of the same size.
  void backward(std::span<const float> seed) const;

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Gradient recording switch; thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

// Builds an op result. The closure is attached only when recording is on and
// some input requires grad. Values are checked for finiteness.
Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<const Tensor*> inputs,
                   const char* op, BackwardFn backward);
Tensor make_result(Shape shape, std::vector<float> values, const std::vector<const Tensor*>& inputs,
                   const char* op, BackwardFn backward);

void check_finite(std::span<const float> values, const char* op);

}  // namespace detail

}  // namespace vitprune
