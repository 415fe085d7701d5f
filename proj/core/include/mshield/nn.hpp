#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mshield/ops.hpp"

namespace mshield {

enum class LayerKind { conv, linear, batch_norm, relu };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  /// Output channels (conv) or features (linear).
  std::int64_t out = 0;
  int kernel = 0;
  int stride = 1;

  static LayerSpec conv(std::int64_t out, int kernel, int stride = 1) { return {LayerKind::conv, out, kernel, stride}; }
  static LayerSpec linear(std::int64_t out) { return {LayerKind::linear, out, 0, 1}; }
  static LayerSpec bn() { return {LayerKind::batch_norm, 0, 0, 1}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 1}; }
  bool operator==(const LayerSpec&) const = default;
};

/// trainable: parameters are bound to the tape and collect gradients.
/// frozen: parameters enter the tape as constants (safe to share across threads).
enum class ParamBinding { trainable, frozen };

template <class T>
struct Layer {
  LayerSpec spec;
  Shape in_shape;  // per example
  Shape out_shape;
  /// conv/linear weight, or batch-norm gamma.
  BasicTensor<T> weight;
  /// linear bias, or batch-norm beta.
  BasicTensor<T> bias;
  BatchNormState<T> bn;
  /// Never bound trainable, whatever the forward binding.
  bool frozen = false;
};

/// A feed-forward stack of conv / linear / batch-norm / relu layers.
/// Linear layers flatten a rank-4 input; the output is always [N, features].
template <class T>
class Sequential {
 public:
  Sequential() = default;
  /// He-normal init for weights followed (after an optional batch norm) by a
  /// relu, N(0, 1/fan_in) otherwise. Conv layers carry no bias.
  Sequential(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t seed, std::string_view stream);

  BasicVar<T> forward(BasicTape<T>& tape, BasicVar<T> x, Mode mode, ParamBinding binding);
  /// Eval-mode, frozen forward on a private tape. Thread-safe.
  BasicTensor<T> infer(const BasicTensor<T>& batch) const;

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::int64_t output_dim() const;
  std::size_t size() const noexcept { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return layers_.at(i); }
  std::vector<LayerSpec> specs() const;

  /// Trainable tensors in a fixed order, with names "<i>.weight", "<i>.bias".
  void visit_params(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
  /// Parameters plus batch-norm running statistics, for checkpoints.
  void visit_state(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
  void visit_state(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const;
  void set_frozen(bool frozen);
  /// Sets the running statistics of every non-frozen batch norm to the exact
  /// statistics of `inputs` propagated through the network in eval mode.
  void refresh_batch_norm(const BasicTensor<T>& inputs);

  template <class U>
  Sequential<U> cast() const {
    Sequential<U> out;
    out.input_shape_ = input_shape_;
    for (const auto& l : layers_) {
      Layer<U> c;
      c.spec = l.spec;
      c.in_shape = l.in_shape;
      c.out_shape = l.out_shape;
      c.frozen = l.frozen;
      c.weight = l.weight.template cast<U>();
      c.bias = l.bias.template cast<U>();
      c.bn.running_mean = l.bn.running_mean.template cast<U>();
      c.bn.running_var = l.bn.running_var.template cast<U>();
      c.bn.momentum = static_cast<U>(l.bn.momentum);
      c.bn.eps = static_cast<U>(l.bn.eps);
      out.layers_.push_back(std::move(c));
    }
    return out;
  }

 private:
  template <class>
  friend class Sequential;

  Shape input_shape_;
  std::vector<Layer<T>> layers_;
};

extern template class Sequential<float>;
extern template class Sequential<double>;

/// Per-example output shape after each layer, e.g. for checking presets.
std::vector<Shape> layer_shapes(const Shape& input_shape, const std::vector<LayerSpec>& specs);

}  // namespace mshield
