#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mshield {

using Shape = std::vector<std::int64_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array. Production code uses `Tensor` (32-bit floats);
/// `TensorD` exists so gradient checks can run the same kernels in double.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  std::vector<T>& storage() noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }
  T& at(std::initializer_list<std::int64_t> index);
  const T& at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Empty span when no gradient has been accumulated.
  std::span<const T> grad() const noexcept;
  /// Allocates a zero gradient buffer on first use.
  std::span<T> grad_mut();
  void clear_grad() noexcept { grad_.reset(); }

  BasicTensor reshaped(Shape shape) const;
  /// Example `i` along the leading axis, with that axis dropped.
  BasicTensor slice_leading(std::int64_t i) const;

  template <class U>
  BasicTensor<U> cast() const {
    if (values_.empty() && shape_.empty()) return BasicTensor<U>();
    std::vector<U> out(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
    BasicTensor<U> t(shape_, std::move(out));
    t.set_requires_grad(requires_grad_);
    return t;
  }

  bool all_finite() const noexcept;

 private:
  std::size_t flat_index(std::initializer_list<std::int64_t> index) const;

  Shape shape_;
  std::vector<T> values_;
  std::optional<std::vector<T>> grad_;
  bool requires_grad_ = false;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

/// Stack per-example tensors along a new leading axis.
template <class T>
BasicTensor<T> stack(std::span<const BasicTensor<T>> items);

}  // namespace mshield
