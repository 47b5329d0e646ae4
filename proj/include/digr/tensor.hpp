#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace digr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;

/// Raised when a primitive receives operands of incompatible shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a primitive produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

// Computes the gradient flowing into input `index` given the gradient of the
// node's output and the output itself. Implemented with differentiable
// primitives so that, with recording enabled, the result is itself part of
// the graph.
using BackwardFn =
    std::function<Tensor(const Tensor& grad_out, const Tensor& output, std::size_t index)>;

struct Node {
  Shape shape;
  Array data;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

std::uint64_t next_sequence();

}  // namespace detail

/// Dense row-major float64 array that may participate in a recorded
/// computation graph. Copies are shallow: a Tensor is a handle.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array data);

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor from_vector(const Shape& shape, const std::vector<double>& values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  Index dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  Index numel() const;

  const Array& array() const;
  /// Mutable access is only legal on tensors that have no recorded history.
  Array& mutable_array();
  std::span<const double> data() const;
  double item() const;
  double operator[](Index i) const { return array()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value = true);
  /// True when this tensor was produced by a recorded primitive.
  bool has_history() const;
  const char* op_name() const;

  /// Value copy cut off from the graph.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Whether primitives currently record graph nodes (thread-local).
bool grad_mode_enabled();

/// Disables recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Forces recording on or off for its lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an output tensor and, if recording is on and any input requires a
/// gradient, attaches it to the graph. Checks the result for NaN/Inf.
Tensor make_result(const char* op, Shape shape, Array data, std::vector<Tensor> inputs,
                   detail::BackwardFn backward);

/// Reverse-mode gradients of a one-element `output` with respect to `wrt`.
/// With `create_graph` the returned gradients are recorded, so they can be
/// differentiated again. Tensors not reachable from `output` get zeros.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

}  // namespace digr
