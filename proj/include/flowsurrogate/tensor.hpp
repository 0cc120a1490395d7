#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "flowsurrogate/error.hpp"

namespace flowsurrogate {

using Shape = std::vector<std::size_t>;

/// Allocator whose value-less construct leaves trivial elements uninitialized.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    std::allocator_traits<std::allocator<T>>::construct(static_cast<std::allocator<T>&>(*this), p,
                                                        std::forward<Args>(args)...);
  }
};

/// Tag for tensors whose contents are written before they are read.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major N-dimensional array.
///
/// A tensor owns its storage; copies are deep. The element count always equals
/// the product of the extents. Element access through operator() is
/// bounds-checked when NDEBUG is not defined.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);
  Tensor(Shape shape, Uninitialized);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept {
    assert(i < data_.size());
    return data_[i];
  }
  const T& operator[](std::size_t i) const noexcept {
    assert(i < data_.size());
    return data_[i];
  }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[offset({i, j})]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[offset({i, j})]; }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[offset({n, c, h, w})];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[offset({n, c, h, w})];
  }

  void fill(T value);
  /// Reinterpret with a new shape of identical element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(T factor);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const noexcept {
    assert(idx.size() == shape_.size());
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      assert(i < shape_[axis]);
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T, DefaultInitAllocator<T>> data_;
};

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T squared_norm(const Tensor<T>& a);

/// Throws ShapeError naming `what` when the shapes differ.
void require_same_shape(const Shape& a, const Shape& b, const char* what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace flowsurrogate
