#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddc {

/// Raised when tensor or layer shapes are incompatible.
class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised when a value lies outside an operation's domain.
class DomainError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Shape4 {
  int n = 1;
  int h = 1;
  int w = 1;
  int c = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  bool operator==(const Shape4&) const = default;
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," +
           std::to_string(w) + "," + std::to_string(c) + ")";
  }
};

/// Dense NHWC tensor. Channel index is fastest-varying.
template <typename T>
class Tensor4 {
public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
    if (shape.n < 1 || shape.h < 1 || shape.w < 1 || shape.c < 1)
      throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
    data_.assign(shape.size(), fill);
  }

  Tensor4(int n, int h, int w, int c, T fill = T(0))
      : Tensor4(Shape4{n, h, w, c}, fill) {}

  Tensor4(Shape4 shape, std::vector<T> data)
      : shape_(shape), data_(std::move(data)) {
    if (shape.n < 1 || shape.h < 1 || shape.w < 1 || shape.c < 1)
      throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
    if (data_.size() != shape.size())
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape.str());
  }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  int c() const { return shape_.c; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t offset(int b, int i, int j, int k) const {
    assert(b >= 0 && b < shape_.n && i >= 0 && i < shape_.h && j >= 0 &&
           j < shape_.w && k >= 0 && k < shape_.c);
    return ((static_cast<std::size_t>(b) * shape_.h + i) * shape_.w + j) *
               shape_.c +
           k;
  }

  T& operator()(int b, int i, int j, int k) { return data_[offset(b, i, j, k)]; }
  const T& operator()(int b, int i, int j, int k) const {
    return data_[offset(b, i, j, k)];
  }

  /// Bounds-checked access in every build type.
  const T& at(int b, int i, int j, int k) const {
    if (b < 0 || b >= shape_.n || i < 0 || i >= shape_.h || j < 0 ||
        j >= shape_.w || k < 0 || k >= shape_.c)
      throw std::out_of_range("tensor index out of range");
    return data_[offset(b, i, j, k)];
  }

  /// Pointer to the channel vector at pixel (b, i, j).
  T* pixel(int b, int i, int j) { return data_.data() + offset(b, i, j, 0); }
  const T* pixel(int b, int i, int j) const {
    return data_.data() + offset(b, i, j, 0);
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.vec().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

private:
  Shape4 shape_{};
  std::vector<T> data_;
};

}  // namespace ddc
