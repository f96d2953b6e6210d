#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vnmt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a computation produces NaN or infinity where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles (rank 0, 1 or 2) with optional participation in the
/// reverse-mode tape. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return node().value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node().value; }
  /// Mutable access for leaves only (parameters updated by an optimizer or a test).
  std::span<double> mutable_values();
  std::vector<double> to_vector() const { return node().value; }

  double item() const;
  double operator[](std::size_t i) const { return node().value.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().leaf; }
  /// Accumulated gradient; empty when backward has not reached this tensor.
  std::span<const double> grad() const { return node().grad; }
  void zero_grad();

  /// Identity of the underlying node, stable across copies.
  const void* id() const noexcept { return node_.get(); }

  // Internal hooks for op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  detail::Node& node() const;
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are reset at the start of each call.
void backward(const Tensor& scalar);

/// True while gradient recording is enabled on this thread.
bool grad_enabled();

/// Disables tape recording on the current thread for the guard's lifetime.
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

/// Builds an op result. Parents and the backward closure are kept only when recording is
/// on and at least one parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace vnmt
