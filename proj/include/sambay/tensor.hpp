#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sambay/error.hpp"

namespace sambay {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Gradient recording is on by default. Inference paths disable it with
// NoGradGuard so that ops do not retain their inputs.
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

std::uint64_t next_node_id();

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) {
      grad.assign(data.size(), T{0});
    }
    return grad;
  }
};

}  // namespace detail

// Dense row-major array with optional reverse-mode gradient tracking.
//
// A Tensor is a cheap handle; copies share the underlying buffer. Operations
// never modify their inputs. Only leaves (parameters) may be written through
// mutable_data(), which is what optimizers do between steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : node_(std::make_shared<NodeT>()) {
    node_->data.assign(sambay::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<NodeT>()) {
    if (sambay::numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  static Tensor from_node(std::shared_ptr<NodeT> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : dim(0); }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  const T* ptr() const { return node_->data.data(); }

  std::span<T> mutable_data() {
    if (!node_->is_leaf()) {
      throw Error("tensor: mutable_data() on a non-leaf tensor");
    }
    return node_->data;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("tensor: item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  std::string_view op_name() const { return node_->op; }

  // Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

// Reverse-mode traversal of the graph reachable from a root tensor.
template <typename T>
class ComputeGraph {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  explicit ComputeGraph(const Tensor<T>& root);

  // Nodes in creation order; backward visits them back to front.
  const std::vector<NodePtr>& nodes() const { return nodes_; }

  // Seeds d(root)/d(root) = 1 and propagates. Leaf grads accumulate across
  // calls; intermediate grads are recomputed from scratch each time.
  void backward();

 private:
  NodePtr root_;
  std::vector<NodePtr> nodes_;
};

template <typename T>
void backward(const Tensor<T>& root);

namespace detail {

// Throws NumericError if any value is NaN or infinite.
template <typename T>
void check_finite(std::span<const T> values, std::string_view op);

// Builds the output node of an op. The backward closure and inputs are
// attached only if grad recording is on and some input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op,
                      std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

}  // namespace sambay
