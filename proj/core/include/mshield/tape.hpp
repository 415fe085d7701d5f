#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "mshield/tensor.hpp"

namespace mshield {

enum class Mode { train, eval };

template <class T>
class BasicTape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the
/// owning tape is alive and has not been cleared.
template <class T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Shape& shape() const { return tape->shape(*this); }
  std::span<const T> value() const { return tape->value(*this); }
  std::int64_t dim(std::size_t axis) const;
};

/// Reverse-mode recording of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. `backward` may run once; `reset_grads` re-arms it
/// without discarding the recorded forward values (used to take several
/// input gradients from a single forward pass).
template <class T>
class BasicTape {
 public:
  using Var = BasicVar<T>;
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(BasicTape&, std::uint32_t self)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  /// A value that never receives a gradient.
  Var constant(TensorT value);
  /// A leaf whose gradient is kept on the tape (read it with `grad`).
  Var input(TensorT value);
  /// A leaf bound to a parameter: when `param.requires_grad()`, backward
  /// accumulates into `param.grad_mut()`. Otherwise behaves like `constant`.
  Var param(TensorT& param);

  const Shape& shape(Var v) const { return node(v).shape; }
  std::span<const T> value(Var v) const { return node(v).value; }
  /// Gradient of the last backward w.r.t. `v`; empty if none flowed there.
  std::span<const T> grad(Var v) const { return node(v).grad; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  TensorT value_tensor(Var v) const;
  TensorT grad_tensor(Var v) const;

  void backward(Var loss);
  void reset_grads();
  bool backward_done() const noexcept { return backward_done_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::uint32_t id) const { return nodes_.at(id).op; }
  std::span<const std::uint32_t> inputs_of(std::uint32_t id) const { return nodes_.at(id).inputs; }
  std::span<const T> value_of(std::uint32_t id) const { return nodes_.at(id).value; }

  // Recording interface used by the op implementations.
  Var record(std::string_view op, Shape shape, std::vector<T> value,
             std::initializer_list<Var> inputs, BackwardFn backward);
  std::span<const T> grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  std::span<const T> value_at(std::uint32_t id) const { return nodes_[id].value; }
  bool needs_grad_at(std::uint32_t id) const { return nodes_[id].needs_grad; }
  /// Zero-initialised on first access.
  std::span<T> grad_buffer(std::uint32_t id);

 private:
  struct Node {
    std::string_view op;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    TensorT* param = nullptr;
    bool needs_grad = false;
  };

  const Node& node(Var v) const;
  Var push(Node n);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;
using TapeD = BasicTape<double>;
using VarD = BasicVar<double>;

extern template class BasicTape<float>;
extern template class BasicTape<double>;

}  // namespace mshield
