#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmed/error.hpp"

namespace xmed {

/// Dimensions of a rank-4 (batch, channel, height, width) array.
struct Shape4 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t size() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  constexpr bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Cache-line aligned storage. Eigen's vectorized kernels peel leading
/// elements according to the pointer's alignment, which changes summation
/// order; a fixed alignment keeps results a function of shapes alone.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense rank-4 array in row-major (n, c, h, w) order.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() : data_(1, T{0}) {}

  explicit Tensor4(Shape4 shape, T fill = T{0}) : shape_(check(shape)), data_(shape.size(), fill) {}

  Tensor4(Shape4 shape, const std::vector<T>& data) : shape_(check(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t n() const noexcept { return shape_.n; }
  std::size_t c() const noexcept { return shape_.c; }
  std::size_t h() const noexcept { return shape_.h; }
  std::size_t w() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
    return data_[index(n, c, y, x)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[index(n, c, y, x)];
  }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  /// Pointer to the (h, w) plane of sample n, channel c.
  T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  /// Copy of sample n as a batch of one.
  Tensor4 sample(std::size_t n) const {
    const std::size_t stride = shape_.c * shape_.plane();
    Tensor4 out({1, shape_.c, shape_.h, shape_.w});
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(n * stride), stride, out.data_.begin());
    return out;
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  Tensor4& operator+=(const Tensor4& other) {
    require_same(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor4& operator*=(T scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  void require_same(const Tensor4& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + other.shape_.str());
    }
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  static Shape4 check(Shape4 s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
      throw ShapeError("tensor dimensions must all be >= 1, got " + s.str());
    }
    return s;
  }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape4 shape_{};
  AlignedVector<T> data_;
};

using Tensor = Tensor4<float>;

}  // namespace xmed
