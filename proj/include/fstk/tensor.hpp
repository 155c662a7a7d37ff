#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fstk/common.hpp"

namespace fstk {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor. Rank-4 data is laid out (sample, channel, row,
// column); lower ranks are allowed wherever an operation does not require
// spatial structure.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {
    for (int d : shape_)
      if (d <= 0) check_arg(false, "tensor extents must be positive, got " + shape_str(shape_));
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    Tensor t;
    check_arg(shape_numel(shape) == static_cast<long long>(data.size()),
              "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  long long numel() const { return static_cast<long long>(data_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](long long i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](long long i) const { return data_[static_cast<size_t>(i)]; }

  // rank-4 accessors
  T& at4(int n, int c, int i, int j) { return data_[static_cast<size_t>(idx4(n, c, i, j))]; }
  const T& at4(int n, int c, int i, int j) const { return data_[static_cast<size_t>(idx4(n, c, i, j))]; }
  long long idx4(int n, int c, int i, int j) const {
    return ((static_cast<long long>(n) * shape_[1] + c) * shape_[2] + i) * shape_[3] + j;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  Tensor& fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
    return *this;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

}  // namespace fstk
