#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attnet/errors.hpp"

namespace attnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  // Empty until a gradient is needed; same length as data afterwards.
  std::vector<double> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major float64 array with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, which is how a
// parameter is referenced from many recorded operations. Use clone() for an
// independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    std::vector<double> data(numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(data), false);
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    return Tensor(std::move(shape), std::move(data), false);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}, false); }

  // Leaf with requires_grad set and a zeroed gradient buffer.
  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data), true);
    t.node_->ensure_grad();
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  Tensor clone() const {
    Tensor t(node_->shape, node_->data, node_->requires_grad);
    if (t.requires_grad()) t.node_->ensure_grad();
    return t;
  }

  bool all_finite() const {
    for (double v : node_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool is(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  friend class Tape;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad)
      : node_(std::make_shared<detail::TensorNode>()) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::TensorNode> node_;
};

// A parameter tensor with a stable name, as stored in checkpoints.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace attnet
