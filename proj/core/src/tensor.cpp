#include "mshield/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mshield/error.hpp"

namespace mshield {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw DimensionError("shape " + shape_string(shape) + " has a non-positive extent");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_numel(shape_) != values_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(values_.size()) + " values");
  }
}

template <class T>
std::int64_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

template <class T>
std::size_t BasicTensor<T>::flat_index(std::initializer_list<std::int64_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " vs tensor rank " +
                         std::to_string(shape_.size()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape_[axis]) {
      throw DimensionError("index " + std::to_string(i) + " out of range on axis " +
                           std::to_string(axis));
    }
    flat = flat * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return flat;
}

template <class T>
T& BasicTensor<T>::at(std::initializer_list<std::int64_t> index) {
  return values_[flat_index(index)];
}

template <class T>
const T& BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
  return values_[flat_index(index)];
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const noexcept {
  if (!grad_) return {};
  return *grad_;
}

template <class T>
std::span<T> BasicTensor<T>::grad_mut() {
  if (!grad_) grad_.emplace(values_.size(), T{0});
  return *grad_;
}

template <class T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != values_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return BasicTensor(std::move(shape), values_);
}

template <class T>
BasicTensor<T> BasicTensor<T>::slice_leading(std::int64_t i) const {
  if (shape_.empty() || i < 0 || i >= shape_[0]) {
    throw DimensionError("leading index " + std::to_string(i) + " out of range for " +
                         shape_string(shape_));
  }
  Shape inner(shape_.begin() + 1, shape_.end());
  if (inner.empty()) inner = {1};
  const std::size_t n = shape_numel(inner);
  std::vector<T> out(values_.begin() + static_cast<std::ptrdiff_t>(i * n),
                     values_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return BasicTensor(std::move(inner), std::move(out));
}

template <class T>
bool BasicTensor<T>::all_finite() const noexcept {
  for (auto v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class T>
BasicTensor<T> stack(std::span<const BasicTensor<T>> items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  const Shape& inner = items.front().shape();
  Shape shape{static_cast<std::int64_t>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<T> values;
  values.reserve(shape_numel(shape));
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw DimensionError("stack: " + shape_string(t.shape()) + " vs " + shape_string(inner));
    }
    values.insert(values.end(), t.values().begin(), t.values().end());
  }
  return BasicTensor<T>(std::move(shape), std::move(values));
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> stack(std::span<const BasicTensor<float>>);
template BasicTensor<double> stack(std::span<const BasicTensor<double>>);

}  // namespace mshield
