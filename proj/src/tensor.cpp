#include "sambay/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace sambay {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      s += ", ";
    }
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_node_counter{0};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_node_id() { return g_node_counter.fetch_add(1, std::memory_order_relaxed); }

template <typename T>
void check_finite(std::span<const T> values, std::string_view op) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op,
                      std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  check_finite<T>(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& t : inputs) {
        node->inputs.push_back(t.node());
      }
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

template <typename T>
ComputeGraph<T>::ComputeGraph(const Tensor<T>& root) : root_(root.node()) {
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<NodePtr> stack{root_};
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) {
      continue;
    }
    for (const auto& in : n->inputs) {
      stack.push_back(in);
    }
    nodes_.push_back(std::move(n));
  }
  std::sort(nodes_.begin(), nodes_.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id < b->id; });
}

template <typename T>
void ComputeGraph<T>::backward() {
  if (root_->data.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(root_->shape));
  }
  if (!root_->requires_grad) {
    throw Error("backward: root does not require grad");
  }
  for (const auto& n : nodes_) {
    if (!n->is_leaf()) {
      n->grad.assign(n->data.size(), T{0});
    }
  }
  root_->ensure_grad()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node<T>& n = **it;
    if (n.is_leaf() || !n.backward) {
      continue;
    }
    for (const auto& in : n.inputs) {
      if (in->requires_grad) {
        in->ensure_grad();
      }
    }
    n.backward(n);
  }
  // Intermediate buffers are only needed during propagation.
  for (const auto& n : nodes_) {
    if (!n->is_leaf()) {
      std::vector<T>().swap(n->grad);
    }
  }
}

template <typename T>
void backward(const Tensor<T>& root) {
  ComputeGraph<T>(root).backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class ComputeGraph<float>;
template class ComputeGraph<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void detail::check_finite(std::span<const float>, std::string_view);
template void detail::check_finite(std::span<const double>, std::string_view);
template Tensor<float> detail::make_result(Shape, std::vector<float>, std::string_view,
                                           std::vector<Tensor<float>>,
                                           std::function<void(detail::Node<float>&)>);
template Tensor<double> detail::make_result(Shape, std::vector<double>, std::string_view,
                                            std::vector<Tensor<double>>,
                                            std::function<void(detail::Node<double>&)>);

}  // namespace sambay
