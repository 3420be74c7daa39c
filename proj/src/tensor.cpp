#include "cprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

namespace cprune {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class BasicTensor<float>;
template class BasicTensor<double>;

LowerTriangular LowerTriangular::identity(std::size_t dim) {
  LowerTriangular l(dim);
  for (std::size_t i = 0; i < dim; ++i) l(i, i) = 1.0;
  return l;
}

LowerTriangular LowerTriangular::from_dense(const Tensor64& m) {
  if (m.rank() != 2 || m.rows() != m.cols()) throw ShapeError("from_dense expects a square matrix");
  LowerTriangular l(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c <= r; ++c) l(r, c) = m(r, c);
  return l;
}

void LowerTriangular::append_row(std::span<const double> entries, double diagonal) {
  if (entries.size() != dim_) throw ShapeError("append_row: entry count must equal current dim");
  packed_.insert(packed_.end(), entries.begin(), entries.end());
  packed_.push_back(diagonal);
  ++dim_;
}

void LowerTriangular::truncate(std::size_t new_dim) {
  if (new_dim > dim_) throw ShapeError("truncate cannot grow a triangular matrix");
  dim_ = new_dim;
  packed_.resize(new_dim * (new_dim + 1) / 2);
}

Tensor64 LowerTriangular::to_dense() const {
  if (dim_ == 0) return Tensor64();
  Tensor64 m = Tensor64::matrix(dim_, dim_);
  for (std::size_t r = 0; r < dim_; ++r)
    for (std::size_t c = 0; c <= r; ++c) m(r, c) = (*this)(r, c);
  return m;
}

void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  const std::size_t block = (count + workers - 1) / workers;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        const std::size_t lo = w * block;
        const std::size_t hi = std::min(count, lo + block);
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace cprune
