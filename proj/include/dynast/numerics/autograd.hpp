#pragma once

// Tape-free reverse-mode differentiation. Every op returns a Var whose node
// keeps its inputs alive and a closure that pushes the node's gradient into
// the inputs. backward() walks the graph in reverse topological order.
//
// Gradients accumulate across uses of a node; leaves keep their gradient
// until zero_grad(). One backward pass at a time per set of leaves.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dynast/numerics/tensor.hpp"

namespace dynast {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var leaf(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value[0]; }

  void zero_grad() const { node_->grad = Tensor(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient buffer of an input, allocated as zeros on first use.
inline Tensor& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

// Buffer of self.inputs[i], or nullptr when that input needs no gradient.
inline Tensor* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &grad_buffer(in) : nullptr;
}

inline const Tensor& input_value(const Node& self, std::size_t i) { return self.inputs[i]->value; }

// Builds the result node of an op. If no input requires a gradient the result
// is a plain constant and the closure is dropped.
inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) n->inputs.push_back(v.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// Reverse pass from `root`. If `seed` is empty the root must hold one element
// and is seeded with 1.
inline void backward(const Var& root, Tensor seed = {}) {
  if (!root.requires_grad()) return;
  if (seed.empty()) {
    if (root.size() != 1) {
      throw ShapeError("backward: root of shape " + shape_str(root.shape()) + " needs an explicit seed");
    }
    seed = Tensor(root.shape(), 1.0);
  } else if (seed.shape() != root.shape()) {
    throw ShapeError("backward: seed " + shape_str(seed.shape()) + " vs root " + shape_str(root.shape()));
  }

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor& rg = grad_buffer(root.node());
  for (std::size_t i = 0; i < rg.size(); ++i) rg[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

struct Parameter {
  std::string name;
  Var var;
};

// Ordered, uniquely named collection of trainable leaves.
class ParameterStore {
 public:
  Var add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' declared twice");
    index_.emplace(name, params_.size());
    params_.push_back({name, Var::leaf(std::move(init))});
    return params_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Var get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].var;
  }

  std::size_t size() const { return params_.size(); }
  const std::vector<Parameter>& params() const { return params_; }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Same names and values, fresh leaves with no gradient. Used for per-thread
  // gradient buffers.
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& p : params_) out.add(p.name, p.var.value());
    return out;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace dynast
