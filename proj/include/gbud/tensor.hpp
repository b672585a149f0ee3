#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gbud/error.hpp"

namespace gbud {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array with shared, immutable storage. Copies are cheap and
/// never alias mutable state: every operation producing new values allocates.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : data_(std::make_shared<const std::vector<T>>()) {}

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(element_count(shape_), fill)) {}

  BasicTensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (element_count(shape_) != values.size()) {
      throw ShapeError("size", "tensor: shape " + shape_string(shape_) + " holds " +
                                   std::to_string(element_count(shape_)) + " elements, got " +
                                   std::to_string(values.size()));
    }
    data_ = std::make_shared<const std::vector<T>>(std::move(values));
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_->size(); }
  bool empty() const noexcept { return data_->empty(); }

  std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
  const std::vector<T>& values() const noexcept { return *data_; }
  T operator[](std::size_t i) const { return (*data_)[i]; }

  /// Element of a rank-3 [c,h,w] tensor.
  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return (*data_)[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Scalar value of a single-element tensor.
  T item() const {
    if (size() != 1) throw ShapeError("size", "item: tensor is not a scalar " + shape_string(shape_));
    return (*data_)[0];
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_->begin(), data_->end()));
  }

  bool all_finite() const {
    for (T v : *data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Exact (value) equality of shape and elements.
  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && *a.data_ == *b.data_;
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
};

using Tensor = BasicTensor<float>;

/// Equality of shapes and raw element bytes.
template <typename T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0);
}

}  // namespace gbud
