#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cprune {

/// Thrown when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a factorization meets a non-positive pivot or a near-zero
/// triangular diagonal.
class SingularError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major n-dimensional array.
///
/// Float tensors carry images, feature maps and weights; double tensors carry
/// statistics and factorization inputs.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor buffer length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
    return BasicTensor({rows, cols}, fill);
  }

  static BasicTensor identity(std::size_t n) {
    BasicTensor m = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& buffer() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same buffer, new shape of equal element count.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const;

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return BasicTensor<To>(t.shape(), std::move(out));
}

/// Lower-triangular matrix with a packed row-major buffer: row i holds
/// entries (i, 0..i) at offset i(i+1)/2. Appending a row is a buffer append.
class LowerTriangular {
 public:
  LowerTriangular() = default;
  explicit LowerTriangular(std::size_t dim) : dim_(dim), packed_(dim * (dim + 1) / 2, 0.0) {}

  static LowerTriangular identity(std::size_t dim);
  static LowerTriangular from_dense(const Tensor64& m);

  std::size_t dim() const { return dim_; }

  double& operator()(std::size_t r, std::size_t c) { return packed_[r * (r + 1) / 2 + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return c <= r ? packed_[r * (r + 1) / 2 + c] : 0.0;
  }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(packed_).subspan(r * (r + 1) / 2, r + 1);
  }

  /// Appends row [entries..., diagonal]; `entries.size()` must equal dim().
  void append_row(std::span<const double> entries, double diagonal);
  /// Drops trailing rows so that dim() == new_dim.
  void truncate(std::size_t new_dim);

  Tensor64 to_dense() const;
  const std::vector<double>& packed() const { return packed_; }

 private:
  std::size_t dim_ = 0;
  std::vector<double> packed_;
};

/// Runs fn(i) for i in [0, count) on up to `workers` threads. Work items are
/// assigned in contiguous blocks; callers write results into per-index slots
/// so the outcome does not depend on the worker count.
void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t)>& fn);

}  // namespace cprune
