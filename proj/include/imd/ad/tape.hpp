#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every value produced during a forward pass together with a
// closure that pushes the node's gradient into its parents. Nodes are stored
// in creation order, so walking the tape backwards is a valid topological
// order for the backward pass.

#include <cassert>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "imd/core/error.hpp"
#include "imd/core/tensor.hpp"

namespace imd::ad {

template <class T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as its Tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  int dim(int i) const { return value().dim(i); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return value().data[0];
  }
  const Tensor<T>& grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Records an op result. The backward closure is dropped when no parent needs a gradient.
  Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    return emit(std::move(value), std::vector<Var<T>>(parents), std::move(backward));
  }
  Var<T> emit(Tensor<T> value, const std::vector<Var<T>>& parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) {
      assert(p.tape() == this);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& grad(int id) const { return nodes_[id].grad; }

  /// Gradient buffer of `id`, zero-initialised on first access.
  Tensor<T>& grad_buffer(int id) {
    auto& n = nodes_[id];
    if (n.grad.shape != n.value.shape) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  /// Backpropagates from a scalar root seeded with gradient 1.
  void backward(Var<T> root) {
    if (root.numel() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>{};
    grad_buffer(root.id()).data[0] = T(1);
    for (int id = root.id(); id >= 0; --id) {
      auto& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(backward)});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace imd::ad
