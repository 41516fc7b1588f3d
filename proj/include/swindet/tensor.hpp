#pragma once

// Dense row-major tensor with tape-based reverse-mode automatic
// differentiation. The op set is exactly what the detector architecture
// needs; there are no higher-order derivatives. Gradients accumulate until
// zero_grad(), and calling backward() twice accumulates twice.
//
// Values live in a shared buffer so that replicas of a model (one per worker
// thread) can alias parameter storage read-only while keeping private
// gradient buffers.

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "swindet/rng.hpp"

namespace swindet {

using Shape = std::vector<std::int64_t>;

struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct usage_error : std::logic_error {
  using std::logic_error::logic_error;
};
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;  // empty until first touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T v) {
    auto node = std::make_shared<Node>();
    node->value = std::make_shared<std::vector<T>>(shape_numel(shape), v);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw shape_error("from_data: shape " + shape_str(shape) + " does not hold " +
                        std::to_string(data.size()) + " elements");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::make_shared<std::vector<T>>(std::move(data));
    return Tensor(std::move(node));
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.value()) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, T stddev) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.value()) v = static_cast<T>(rng.trunc_normal(stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value->size()); }

  std::vector<T>& value() { return *node_->value; }
  const std::vector<T>& value() const { return *node_->value; }
  T* data() { return node_->value->data(); }
  const T* data() const { return node_->value->data(); }
  T item() const {
    if (size() != 1) throw usage_error("item() on non-scalar tensor " + shape_str(shape()));
    return (*node_->value)[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }

  const std::vector<T>& grad() const { return node_->ensure_grad(); }
  std::vector<T>& grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->grad.size(), T(0));
  }

  // Leaf sharing the value buffer. Used for inference / worker replicas:
  // gradients stay private to the alias.
  Tensor alias(bool requires_grad_flag) const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = requires_grad_flag;
    return Tensor(std::move(node));
  }

  // Leaf with a private copy of the values.
  Tensor clone() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->value = std::make_shared<std::vector<T>>(*node_->value);
    return Tensor(std::move(node));
  }

  // Reverse sweep from a scalar root. Each call propagates a fresh unit
  // seed; leaves accumulate across calls (and across graphs sharing them),
  // while interior nodes are scratch and reset per sweep.
  void backward() const {
    if (!node_) throw usage_error("backward() on empty tensor");
    if (size() != 1)
      throw usage_error("backward() requires a scalar root, got shape " + shape_str(shape()));
    std::vector<Node*> order;
    topo_order(order);
    for (Node* n : order)
      if (n->backprop && !n->grad.empty()) n->grad.assign(n->grad.size(), T(0));
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  void topo_order(std::vector<Node*>& order) const {
    std::unordered_set<Node*> seen;
    struct Frame {
      Node* n;
      std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get()});
    seen.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        Node* p = f.n->parents[f.next++].get();
        if (seen.insert(p).second) stack.push_back({p});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

// All ops funnel through here. When no parent wants gradients the tape is
// pruned and the result is a plain constant leaf.
template <typename T, typename F>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents, F&& backprop) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::make_shared<std::vector<T>>(std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backprop = std::forward<F>(backprop);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace swindet
