#include "mshield/tape.hpp"

#include <cmath>

#include "mshield/error.hpp"

namespace mshield {

template <class T>
std::int64_t BasicVar<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

template <class T>
const typename BasicTape<T>::Node& BasicTape<T>::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw ContractError("variable does not belong to this tape");
  }
  return nodes_[v.id];
}

template <class T>
typename BasicTape<T>::Var BasicTape<T>::push(Node n) {
  if (shape_numel(n.shape) != n.value.size()) {
    throw DimensionError(std::string(n.op) + ": shape " + shape_string(n.shape) +
                         " does not match " + std::to_string(n.value.size()) + " values");
  }
#ifndef NDEBUG
  for (auto x : n.value) {
    if (!std::isfinite(x)) throw NumericError(std::string(n.op) + " produced a non-finite value");
  }
#endif
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
typename BasicTape<T>::Var BasicTape<T>::constant(TensorT value) {
  Node n;
  n.op = "constant";
  n.shape = value.shape();
  n.value = std::move(value.storage());
  return push(std::move(n));
}

template <class T>
typename BasicTape<T>::Var BasicTape<T>::input(TensorT value) {
  Node n;
  n.op = "input";
  n.shape = value.shape();
  n.value = std::move(value.storage());
  n.needs_grad = true;
  return push(std::move(n));
}

template <class T>
typename BasicTape<T>::Var BasicTape<T>::param(TensorT& p) {
  Node n;
  n.op = "param";
  n.shape = p.shape();
  n.value.assign(p.values().begin(), p.values().end());
  if (p.requires_grad()) {
    n.param = &p;
    n.needs_grad = true;
  }
  return push(std::move(n));
}

template <class T>
typename BasicTape<T>::Var BasicTape<T>::record(std::string_view op, Shape shape, std::vector<T> value,
                                                std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape != this) throw ContractError(std::string(op) + ": input from another tape");
    n.inputs.push_back(in.id);
    n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <class T>
std::span<T> BasicTape<T>::grad_buffer(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
  return n.grad;
}

template <class T>
typename BasicTape<T>::TensorT BasicTape<T>::value_tensor(Var v) const {
  const auto& n = node(v);
  return TensorT(n.shape, n.value);
}

template <class T>
typename BasicTape<T>::TensorT BasicTape<T>::grad_tensor(Var v) const {
  const auto& n = node(v);
  if (n.grad.empty()) return TensorT(n.shape);
  return TensorT(n.shape, n.grad);
}

template <class T>
void BasicTape<T>::backward(Var loss) {
  const auto& root = node(loss);
  if (root.value.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(root.shape));
  }
  if (backward_done_) {
    throw ContractError("backward already ran on this tape; call reset_grads first");
  }
  backward_done_ = true;
  if (!root.needs_grad) return;
  grad_buffer(loss.id)[0] = T{1};
  for (std::uint32_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto dst = n.param->grad_mut();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }
}

template <class T>
void BasicTape<T>::reset_grads() {
  for (auto& n : nodes_) n.grad.clear();
  backward_done_ = false;
}

template struct BasicVar<float>;
template struct BasicVar<double>;
template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace mshield
