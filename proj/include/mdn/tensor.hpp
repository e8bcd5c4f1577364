#pragma once

// Dense row-major tensor with a recorded graph for reverse-mode autodiff.
//
// A Tensor is a shared handle to a Node. Ops return fresh nodes that keep
// their inputs alive through `parents`; calling backward() on a scalar walks
// the graph once in reverse topological order and accumulates gradients into
// every node that requires them. Leaf tensors (parameters) never reference
// their consumers, so the graph is released as soon as the loss goes away.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdn/error.hpp"

namespace mdn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape dims, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_str(dims));
    }
    if (dims.empty()) dims = {1};
    if (shape_numel(dims) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match dims " + shape_str(dims));
    }
    node_->dims = std::move(dims);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape dims, bool requires_grad = false) {
    const std::size_t n = shape_numel(dims);
    return Tensor(std::move(dims), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape dims, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(dims);
    return Tensor(std::move(dims), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->dims.at(i); }
  // Leading dims folded together; the last dim is the row width.
  std::size_t rows() const { return numel() / cols(); }
  std::size_t cols() const { return node_->dims.back(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const T* ptr() const { return node_->data.data(); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(dims()));
    return node_->data[0];
  }
  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy without graph history.
  Tensor clone() const {
    return Tensor(node_->dims, node_->data, node_->requires_grad);
  }
  // Shares nothing with the graph; gradients stop here.
  Tensor detach() const { return Tensor(node_->dims, node_->data, false); }

  Tensor reshape(Shape dims) const;

  // Reverse-mode sweep from this scalar. Returns the number of graph nodes
  // whose backward rule ran (each at most once).
  std::size_t backward();

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  NodePtr node_;
};

// Builds the result node of an op. Records parents and the backward rule only
// when grad mode is on and some parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape dims, std::vector<T> data,
                      std::vector<std::shared_ptr<detail::Node<T>>> parents,
                      std::function<void(detail::Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(dims), std::move(data));
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_dims) const {
  if (shape_numel(new_dims) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(dims()) + " to " + shape_str(new_dims));
  }
  auto self = node_;
  return make_result<T>(std::move(new_dims), node_->data, {self},
                        [self](detail::Node<T>& out) {
                          auto& g = self->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                        });
}

template <typename T>
std::size_t Tensor<T>::backward() {
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(dims()));
  if (!node_->requires_grad) return 0;

  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += T(1);
  std::size_t visited = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
      ++visited;
    }
  }
  return visited;
}

}  // namespace mdn
