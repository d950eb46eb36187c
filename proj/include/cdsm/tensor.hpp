// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cdsm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// 64-byte aligned storage. Vectorized reductions peel unaligned leading
/// elements, so a fixed alignment keeps summation order (and results)
/// independent of where a buffer happens to land on the heap.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ')';
  return os.str();
}

// Row-major strides.
inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[i] = s[i + 1] * shape[i + 1];
  }
  return s;
}

inline Shape unravel(Index flat, const Shape& shape) {
  Shape idx(shape.size());
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    idx[i] = flat % shape[i];
    flat /= shape[i];
  }
  return idx;
}

inline Index ravel(const Shape& idx, const Shape& shape) {
  Index flat = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    flat = flat * shape[i] + idx[i];
  }
  return flat;
}

/// Dense row-major N-D array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_numel(shape_)), fill) {}

  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

  Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), Storage(data)) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != checked_numel(shape_)) {
      throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(const Shape& idx) { return data_[static_cast<std::size_t>(ravel(idx, shape_))]; }
  double at(const Shape& idx) const { return data_[static_cast<std::size_t>(ravel(idx, shape_))]; }

  // 3-D convenience accessor, used heavily for CHW feature maps.
  double& at3(Index a, Index b, Index c) {
    return data_[static_cast<std::size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  double at3(Index a, Index b, Index c) const {
    return data_[static_cast<std::size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static Index checked_numel(const Shape& shape) {
    for (Index d : shape) {
      if (d < 0) {
        throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
      }
    }
    return numel(shape);
  }

  Shape shape_;
  Storage data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) {
    m = std::max(m, v < 0 ? -v : v);
  }
  return m;
}

}  // namespace cdsm
