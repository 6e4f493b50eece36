#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>

#include "distillforge/tensor.hpp"

namespace distillforge {

/// Named trainable (or frozen state) tensor owned by a layer. Its gradient
/// buffer always has the value's shape.
template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value, bool trainable = true);

  const std::string& name() const noexcept { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  bool trainable() const noexcept { return trainable_; }

  Tensor<T>& value() noexcept { return value_; }
  const Tensor<T>& value() const noexcept { return value_; }
  Tensor<T>& grad() noexcept { return grad_; }
  const Tensor<T>& grad() const noexcept { return grad_; }

  void zero_grad();

 private:
  std::string name_;
  Tensor<T> value_;
  Tensor<T> grad_;
  bool trainable_ = true;
};

template <typename T>
class Tape;

/// Lightweight handle to a node recorded on a Tape. Valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor<T>& value() const;
  /// Gradient accumulated by the last backward(); empty if none reached it.
  const Tensor<T>& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in forward order; backward() walks
/// them in reverse, so the recording order is a valid topological order.
/// A tape supports exactly one backward pass.
template <typename T>
class Tape {
 public:
  /// Receives the gradient flowing into the node and pushes contributions to
  /// the node's inputs through accumulate()/grad_buffer().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf that requires a gradient, readable through Var::grad() after backward.
  Var<T> leaf(Tensor<T> value);
  /// Binds a parameter; its grad() is overwritten by backward().
  Var<T> parameter(Parameter<T>& param);

  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward);
  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, zero-allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id);
  void accumulate(std::size_t id, const Tensor<T>& contribution);

  void backward(const Var<T>& loss);

  /// When disabled, parameters bind as constants and no backward closures are kept.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  /// When enabled (default), any op producing NaN/Inf throws a numeric error.
  void set_check_finite(bool enabled) noexcept { check_finite_ = enabled; }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(std::string_view op, Tensor<T> value, bool requires_grad, BackwardFn backward);

  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool grad_enabled_ = true;
  bool check_finite_ = true;
};

extern template class Parameter<float>;
extern template class Parameter<double>;
extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace distillforge
