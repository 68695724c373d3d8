#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace r2i {

using Shape = std::vector<std::int64_t>;

/// Operand shapes violate an op's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An op produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

/// Dense row-major array with shape metadata.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " elements");
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const T* ptr() const noexcept { return data_.data(); }
  T* ptr() noexcept { return data_.data(); }
  const std::vector<T>& vec() const noexcept { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const& { return BasicTensor(std::move(shape), data_); }
  BasicTensor reshaped(Shape shape) && { return BasicTensor(std::move(shape), std::move(data_)); }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Shape and bit pattern identical (distinguishes -0 from +0 and NaN payloads).
template <class T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(T)) == 0;
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class T>
void require_finite(const BasicTensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
}

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
double mean_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mean_abs_diff");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return a.size() ? s / double(a.size()) : 0.0;
}

/// Copies rows [begin, end) of the leading dimension.
template <class T>
BasicTensor<T> slice_batch(const BasicTensor<T>& t, std::int64_t begin, std::int64_t end) {
  if (t.rank() == 0 || begin < 0 || end > t.dim(0) || begin >= end) {
    throw ShapeError("slice_batch: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_string(t.shape()));
  }
  const std::size_t row = t.size() / static_cast<std::size_t>(t.dim(0));
  Shape s = t.shape();
  s[0] = end - begin;
  std::vector<T> d(t.ptr() + begin * row, t.ptr() + end * row);
  return BasicTensor<T>(std::move(s), std::move(d));
}

/// Concatenates along the leading dimension.
template <class T>
BasicTensor<T> stack_batch(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) throw ShapeError("stack_batch: no inputs");
  Shape s = parts[0].shape();
  std::int64_t n = 0;
  std::vector<T> d;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("stack_batch: shape mismatch " + shape_string(s) + " vs " +
                       shape_string(p.shape()));
    }
    n += p.dim(0);
    d.insert(d.end(), p.data().begin(), p.data().end());
  }
  s[0] = n;
  return BasicTensor<T>(std::move(s), std::move(d));
}

/// Adds a leading batch dimension of 1.
template <class T>
BasicTensor<T> unsqueeze0(const BasicTensor<T>& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return t.reshaped(std::move(s));
}

}  // namespace r2i
