#include "distillforge/autodiff.hpp"

namespace distillforge {

template <typename T>
Parameter<T>::Parameter(std::string name, Tensor<T> value, bool trainable)
    : name_(std::move(name)), value_(std::move(value)), trainable_(trainable) {
  zero_grad();
}

template <typename T>
void Parameter<T>::zero_grad() {
  if (grad_.shape() != value_.shape() || grad_.numel() != value_.numel()) {
    grad_ = Tensor<T>(value_.shape());
  } else {
    grad_.fill(T(0));
  }
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  require(valid(), ErrorKind::state, "use of an unbound variable");
  return tape_->value(id_);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  require(valid(), ErrorKind::state, "use of an unbound variable");
  return tape_->grad(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return valid() && tape_->requires_grad(id_);
}

template <typename T>
Var<T> Tape<T>::push(std::string_view op, Tensor<T> value, bool requires_grad, BackwardFn backward) {
  require(!consumed_, ErrorKind::state, "tape already consumed by backward(); start a new forward pass");
  if (check_finite_ && !value.all_finite()) {
    throw Error(ErrorKind::numeric, "non-finite value produced by " + std::string(op));
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  return push("constant", std::move(value), false, nullptr);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  return push("leaf", std::move(value), true, nullptr);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
  Var<T> v = push(param.name(), param.value(), grad_enabled_, nullptr);
  if (nodes_.back().requires_grad) nodes_.back().param = &param;
  return v;
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    require(in.tape_ == this, ErrorKind::state, std::string(op) + ": input belongs to another tape");
    needs = needs || nodes_[in.id_].requires_grad;
  }
  return push(op, std::move(value), needs, std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    require(in.tape_ == this, ErrorKind::state, std::string(op) + ": input belongs to another tape");
    needs = needs || nodes_[in.id_].requires_grad;
  }
  return push(op, std::move(value), needs, std::move(backward));
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& contribution) {
  if (!nodes_[id].requires_grad) return;
  Tensor<T>& g = grad_buffer(id);
  T* dst = g.data();
  const T* src = contribution.data();
  for (std::size_t i = 0, n = g.numel(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  require(!consumed_, ErrorKind::state, "stale tape: backward() already ran; run a new forward pass first");
  require(loss.tape_ == this, ErrorKind::state, "loss belongs to another tape");
  require(loss.value().numel() == 1, ErrorKind::dimension,
          "backward() needs a scalar loss, got " + shape_str(loss.value().shape()));
  consumed_ = true;

  for (auto& node : nodes_) {
    if (node.param) node.param->zero_grad();
  }
  if (!nodes_[loss.id_].requires_grad) return;

  grad_buffer(loss.id_)[0] = T(1);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.param) {
      T* dst = node.param->grad().data();
      const T* src = node.grad.data();
      for (std::size_t k = 0, n = node.grad.numel(); k < n; ++k) dst[k] += src[k];
    }
  }
}

template class Parameter<float>;
template class Parameter<double>;
template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace distillforge
