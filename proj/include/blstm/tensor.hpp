#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "blstm/error.hpp"
#include "blstm/rng.hpp"

namespace blstm {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of rank 1 to 3.
///
/// A default-constructed tensor is empty (rank 0) and only serves as a
/// placeholder; every tensor built from a shape has positive extents.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    if (empty()) return {};
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    if (shape_.empty() || shape_.size() > 3) {
      throw DimensionError("tensor rank must be 1..3, got shape " + shape_string(shape_));
    }
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

// Raw kernels on row-major buffers. All of them accumulate into `c`; the loop
// order is fixed so results are bit-reproducible.

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a^T * b, with a stored [k x m] and b stored [k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t l = 0; l < k; ++l) {
    const T* arow = a + l * m;
    const T* brow = b + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a * b^T, with a stored [m x k] and b stored [n x k]
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  Tensor<T> c({a.dim(0), b.dim(1)});
  detail::gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.ptr(), b.ptr(), c.ptr());
  return c;
}

template <class T>
T sigmoid(T x) noexcept {
  return T{1} / (T{1} + std::exp(-x));
}

/// In-place softmax over `n` contiguous entries, with max-subtraction.
template <class T>
void softmax_inplace(T* row, std::size_t n) noexcept {
  const T peak = *std::max_element(row, row + n);
  T total{0};
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - peak);
    total += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= total;
}

enum class Activation { sigmoid, tanh, softmax_rows };

/// Elementwise sigmoid/tanh, or softmax over the last axis.
template <class T>
Tensor<T> activate(Activation kind, const Tensor<T>& x) {
  Tensor<T> y = x;
  switch (kind) {
    case Activation::sigmoid:
      for (T& v : y.data()) v = sigmoid(v);
      break;
    case Activation::tanh:
      for (T& v : y.data()) v = std::tanh(v);
      break;
    case Activation::softmax_rows: {
      const std::size_t width = y.shape().back();
      for (std::size_t off = 0; off < y.size(); off += width) softmax_inplace(y.ptr() + off, width);
      break;
    }
  }
  return y;
}

/// Tensor of uniform(a, b) draws in row-major order.
template <class T>
Tensor<T> draw_uniform(Rng& rng, double a, double b, const Shape& shape) {
  if (!(a < b)) {
    throw ParameterError("uniform draw needs a < b, got a=" + std::to_string(a) +
                         " b=" + std::to_string(b));
  }
  Tensor<T> out(shape);
  for (T& v : out.data()) v = static_cast<T>(rng.uniform(a, b));
  return out;
}

/// Tensor of gaussian(mean, stddev) draws in row-major order.
template <class T>
Tensor<T> draw_gaussian(Rng& rng, double mean, double stddev, const Shape& shape) {
  if (!(stddev >= 0.0)) {
    throw ParameterError("gaussian draw needs stddev >= 0, got " + std::to_string(stddev));
  }
  Tensor<T> out(shape);
  for (T& v : out.data()) v = static_cast<T>(rng.gaussian(mean, stddev));
  return out;
}

}  // namespace blstm
