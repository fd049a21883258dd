#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "textcsp/core/tensor.hpp"

// Tape-free reverse-mode autodiff: every op output keeps shared handles to
// its inputs plus a closure that pushes the output gradient back to them.
// Graphs are rebuilt on each forward pass and released with the outputs.
namespace textcsp::nn {

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward_fn;

  // Gradient accumulator, zero-allocated on first use.
  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  // Direct parameter mutation (optimizers, checkpoint loading).
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  Index size() const { return node_->value.size(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. The backward closure runs only when grad mode is on and
// at least one input requires a gradient; otherwise it is dropped immediately.
template <typename T>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                   std::function<void(const Tensor<T>&)> backward_fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& v : inputs)
    if (v.requires_grad()) node.parents.push_back(v.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

// Reverse sweep from a scalar root (seed 1) or from an explicit seed gradient.
template <typename T>
void backward(const Var<T>& root);
template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed);

}  // namespace textcsp::nn
