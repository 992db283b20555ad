// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "aquila/error.hpp"
#include "aquila/tensor.hpp"

namespace aquila {

template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
  Tensor<Real> grad;
  bool trainable = true;
};

// Owns every learned tensor of a model. Parameters live behind unique_ptr so
// references handed to layers stay valid when the set is moved.
template <typename Real>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter<Real>& add(std::string name, Tensor<Real> value) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<Real>>();
    p->name = std::move(name);
    p->grad = Tensor<Real>(value.shape());
    p->value = std::move(value);
    index_.emplace(p->name, params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<Real>* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<Real>* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Parameter<Real>& get(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter: " + std::string(name));
  }
  const Parameter<Real>& get(std::string_view name) const {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter: " + std::string(name));
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Real>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<Real>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(Real(0));
  }

  void set_all_trainable(bool trainable) {
    for (auto& p : params_) p->trainable = trainable;
  }

  void set_trainable_prefix(std::string_view prefix, bool trainable) {
    for (auto& p : params_) {
      if (p->name.starts_with(prefix)) p->trainable = trainable;
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<Real>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename Real>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the reverse
// of insertion order is a valid topological order for backprop.
template <typename Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<Real>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<Real> constant(Tensor<Real> value) {
    return push(std::move(value), false, nullptr);
  }

  // Leaf bound to a parameter, read in place (no copy). Gradients flow
  // straight into p.grad, and only when the parameter is trainable. The value
  // must not change while the tape is alive.
  Var<Real> param(Parameter<Real>& p) {
    Node n;
    n.requires_grad = grad_enabled_ && p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return Var<Real>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  // Leaf that accumulates its own gradient, read back through grad().
  Var<Real> variable(Tensor<Real> value) {
    return push(std::move(value), grad_enabled_, nullptr);
  }

  Var<Real> push(Tensor<Real> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Real>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor<Real>& value(std::uint32_t id) const {
    const Node& n = nodes_.at(id);
    return n.param ? n.param->value : n.value;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of a node, zero-initialised on first touch.
  Tensor<Real>& grad(std::uint32_t id) {
    Node& n = nodes_.at(id);
    if (n.param) return n.param->grad;
    if (n.grad.empty()) n.grad = Tensor<Real>(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::uint32_t id) const {
    const Node& n = nodes_.at(id);
    return n.param != nullptr || !n.grad.empty();
  }

  void backward(Var<Real> root, Real seed = Real(1)) {
    if (root.tape != this) throw Error("backward on a foreign tape");
    if (!nodes_.at(root.id).requires_grad) return;
    if (value(root.id).size() != 1) {
      throw ShapeError("backward root must be a scalar, got " +
                       shape_str(value(root.id).shape()));
    }
    grad(root.id)[0] += seed;
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward) continue;
      if (n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    Backward backward;
    Parameter<Real>* param = nullptr;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

template <typename Real>
const Tensor<Real>& Var<Real>::value() const {
  return tape->value(id);
}

template <typename Real>
bool Var<Real>::requires_grad() const {
  return tape->requires_grad(id);
}

}  // namespace aquila
