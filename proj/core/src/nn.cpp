#include "mshield/nn.hpp"

#include <cmath>
#include <random>

#include "mshield/error.hpp"
#include "mshield/rng.hpp"

namespace mshield {

namespace {

Shape next_shape(const Shape& in, const LayerSpec& spec, std::size_t index) {
  const auto where = [&] { return "layer " + std::to_string(index) + ": "; };
  switch (spec.kind) {
    case LayerKind::conv: {
      if (in.size() != 3) throw DimensionError(where() + "conv needs a [C,H,W] input, got " + shape_string(in));
      if (spec.kernel < 1 || spec.stride < 1 || spec.out < 1) throw ConfigError(where() + "bad conv spec");
      if (spec.kernel > in[1] || spec.kernel > in[2]) {
        throw DimensionError(where() + "kernel " + std::to_string(spec.kernel) + " exceeds input " + shape_string(in));
      }
      return {spec.out, (in[1] - spec.kernel) / spec.stride + 1, (in[2] - spec.kernel) / spec.stride + 1};
    }
    case LayerKind::linear:
      if (spec.out < 1) throw ConfigError(where() + "bad linear spec");
      return {spec.out};
    case LayerKind::batch_norm:
    case LayerKind::relu:
      return in;
  }
  return in;
}

std::int64_t flat(const Shape& s) { return static_cast<std::int64_t>(shape_numel(s)); }

}  // namespace

std::vector<Shape> layer_shapes(const Shape& input_shape, const std::vector<LayerSpec>& specs) {
  std::vector<Shape> out;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    cur = next_shape(cur, specs[i], i);
    out.push_back(cur);
  }
  return out;
}

template <class T>
Sequential<T>::Sequential(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t seed,
                          std::string_view stream)
    : input_shape_(std::move(input_shape)) {
  shape_numel(input_shape_);
  Shape cur = input_shape_;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Layer<T> l;
    l.spec = specs[i];
    l.in_shape = cur;
    l.out_shape = next_shape(cur, specs[i], i);
    const bool weighted = specs[i].kind == LayerKind::conv || specs[i].kind == LayerKind::linear;
    if (weighted) {
      std::size_t j = i + 1;
      if (j < specs.size() && specs[j].kind == LayerKind::batch_norm) ++j;
      const bool he = j < specs.size() && specs[j].kind == LayerKind::relu;
      std::int64_t fan_in = 0;
      Shape wshape;
      if (specs[i].kind == LayerKind::conv) {
        fan_in = cur[0] * specs[i].kernel * specs[i].kernel;
        wshape = {specs[i].out, cur[0], specs[i].kernel, specs[i].kernel};
      } else {
        fan_in = flat(cur);
        wshape = {specs[i].out, fan_in};
        l.bias = BasicTensor<T>(Shape{specs[i].out}, T{0});
        l.bias.set_requires_grad(true);
      }
      auto rng = make_rng(seed, stream, i);
      std::normal_distribution<double> normal(0.0, std::sqrt((he ? 2.0 : 1.0) / static_cast<double>(fan_in)));
      l.weight = BasicTensor<T>(wshape);
      for (auto& v : l.weight.values()) v = static_cast<T>(normal(rng));
      l.weight.set_requires_grad(true);
    } else if (specs[i].kind == LayerKind::batch_norm) {
      const auto channels = cur[0];
      l.weight = BasicTensor<T>(Shape{channels}, T{1});
      l.bias = BasicTensor<T>(Shape{channels}, T{0});
      l.weight.set_requires_grad(true);
      l.bias.set_requires_grad(true);
      l.bn = BatchNormState<T>(channels);
    }
    cur = l.out_shape;
    layers_.push_back(std::move(l));
  }
}

template <class T>
std::int64_t Sequential<T>::output_dim() const {
  return flat(layers_.empty() ? input_shape_ : layers_.back().out_shape);
}

template <class T>
std::vector<LayerSpec> Sequential<T>::specs() const {
  std::vector<LayerSpec> out;
  for (const auto& l : layers_) out.push_back(l.spec);
  return out;
}

template <class T>
BasicVar<T> Sequential<T>::forward(BasicTape<T>& tape, BasicVar<T> x, Mode mode, ParamBinding binding) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || Shape(xs.begin() + 1, xs.end()) != input_shape_) {
    throw DimensionError("network expects [N]+" + shape_string(input_shape_) + ", got " + shape_string(xs));
  }
  auto bind = [&](Layer<T>& l, BasicTensor<T>& t) {
    if (binding == ParamBinding::frozen || l.frozen) return tape.constant(t);
    return tape.param(t);
  };
  BasicVar<T> h = x;
  for (auto& l : layers_) {
    switch (l.spec.kind) {
      case LayerKind::conv:
        h = ops::conv2d(h, bind(l, l.weight), l.spec.stride);
        break;
      case LayerKind::linear:
        if (h.shape().size() > 2) h = ops::flatten(h);
        h = ops::linear(h, bind(l, l.weight), bind(l, l.bias));
        break;
      case LayerKind::batch_norm:
        h = ops::batch_norm(h, bind(l, l.weight), bind(l, l.bias), l.bn, l.frozen ? Mode::eval : mode);
        break;
      case LayerKind::relu:
        h = ops::relu(h);
        break;
    }
  }
  if (h.shape().size() > 2) h = ops::flatten(h);
  return h;
}

template <class T>
void Sequential<T>::refresh_batch_norm(const BasicTensor<T>& inputs) {
  if (inputs.rank() < 2 || Shape(inputs.shape().begin() + 1, inputs.shape().end()) != input_shape_) {
    throw DimensionError("network expects [N]+" + shape_string(input_shape_) + ", got " + shape_string(inputs.shape()));
  }
  BasicTensor<T> h = inputs;
  for (auto& l : layers_) {
    if (l.spec.kind == LayerKind::batch_norm && !l.frozen) {
      const auto& s = h.shape();
      const std::int64_t n = s[0], c = s[1];
      const std::int64_t inner = static_cast<std::int64_t>(h.numel()) / (n * c);
      const double count = static_cast<double>(n * inner);
      const auto v = h.values();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double m = 0, sq = 0;
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t p = 0; p < inner; ++p) m += v[static_cast<std::size_t>((b * c + ch) * inner + p)];
        m /= count;
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t p = 0; p < inner; ++p) {
            const double d = v[static_cast<std::size_t>((b * c + ch) * inner + p)] - m;
            sq += d * d;
          }
        l.bn.running_mean[static_cast<std::size_t>(ch)] = static_cast<T>(m);
        l.bn.running_var[static_cast<std::size_t>(ch)] = static_cast<T>(count > 1 ? sq / (count - 1) : sq / count);
      }
    }
    BasicTape<T> tape;
    auto x = tape.constant(std::move(h));
    switch (l.spec.kind) {
      case LayerKind::conv:
        x = ops::conv2d(x, tape.constant(l.weight), l.spec.stride);
        break;
      case LayerKind::linear:
        if (x.shape().size() > 2) x = ops::flatten(x);
        x = ops::linear(x, tape.constant(l.weight), tape.constant(l.bias));
        break;
      case LayerKind::batch_norm:
        x = ops::batch_norm(x, tape.constant(l.weight), tape.constant(l.bias), l.bn, Mode::eval);
        break;
      case LayerKind::relu:
        x = ops::relu(x);
        break;
    }
    h = tape.value_tensor(x);
  }
}

template <class T>
BasicTensor<T> Sequential<T>::infer(const BasicTensor<T>& batch) const {
  BasicTape<T> tape;
  // Eval mode with frozen binding reads but never writes layer state.
  auto* self = const_cast<Sequential<T>*>(this);
  return tape.value_tensor(self->forward(tape, tape.constant(batch), Mode::eval, ParamBinding::frozen));
}

template <class T>
void Sequential<T>::visit_params(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const auto p = std::to_string(i) + ".";
    if (!l.weight.empty()) fn(p + "weight", l.weight);
    if (!l.bias.empty()) fn(p + "bias", l.bias);
  }
}

template <class T>
void Sequential<T>::visit_state(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  visit_params(fn);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    if (l.spec.kind != LayerKind::batch_norm) continue;
    const auto p = std::to_string(i) + ".";
    fn(p + "running_mean", l.bn.running_mean);
    fn(p + "running_var", l.bn.running_var);
  }
}

template <class T>
void Sequential<T>::visit_state(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const {
  const_cast<Sequential<T>*>(this)->visit_state(
      [&](const std::string& name, BasicTensor<T>& t) { fn(name, static_cast<const BasicTensor<T>&>(t)); });
}

template <class T>
void Sequential<T>::set_frozen(bool frozen) {
  for (auto& l : layers_) l.frozen = frozen;
}

template class Sequential<float>;
template class Sequential<double>;

}  // namespace mshield
