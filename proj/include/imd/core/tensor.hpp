#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include "imd/core/error.hpp"

namespace imd {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Cache-line aligned storage. Vectorized reductions peel differently
/// depending on the start address, so every buffer starts on the same boundary.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Storage = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array with a dynamic shape.
template <class T>
struct Tensor {
  Shape shape;
  Storage<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::initializer_list<T> values) : shape(std::move(s)), data(values) { check_size(); }
  template <std::ranges::input_range R>
  Tensor(Shape s, R&& values) : shape(std::move(s)), data(std::ranges::begin(values), std::ranges::end(values)) {
    check_size();
  }
  Tensor(Shape s, Storage<T>&& values) : shape(std::move(s)), data(std::move(values)) { check_size(); }

  void check_size() const {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  bool empty() const { return data.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T& at(int c, int i, int j) { return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j]; }
  const T& at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

}  // namespace imd
