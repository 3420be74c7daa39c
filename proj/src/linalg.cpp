#include "cprune/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace cprune {

namespace {

constexpr double kSymmetryTolerance = 1e-9;
// Pivots at or below this fraction of the largest diagonal entry are treated
// as a loss of positive definiteness.
constexpr double kPivotTolerance = 1e-13;
constexpr double kTriDiagonalTolerance = 1e-14;

void require_matrix(const Shape& shape, const char* what) {
  if (shape.size() != 2) throw ShapeError(std::string(what) + " expects a 2-D tensor, got " + shape_string(shape));
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t workers) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), inner = a.cols(), n = b.cols();
  BasicTensor<T> out = BasicTensor<T>::matrix(m, n);
  const T* bp = b.data();
  parallel_for(m, workers, [&](std::size_t i) {
    T* row = out.data() + i * n;
    const T* arow = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const T aik = arow[k];
      if (aik == T{0}) continue;
      const T* brow = bp + k * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aik * brow[j];
    }
  });
  return out;
}

template Tensor matmul(const Tensor&, const Tensor&, std::size_t);
template Tensor64 matmul(const Tensor64&, const Tensor64&, std::size_t);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& m) {
  require_matrix(m.shape(), "transpose");
  BasicTensor<T> t = BasicTensor<T>::matrix(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

template Tensor transpose(const Tensor&);
template Tensor64 transpose(const Tensor64&);

std::size_t ConvGeometry::out_extent(std::size_t in_extent) const {
  const std::size_t padded = in_extent + 2 * padding;
  if (kernel == 0 || stride == 0) throw ShapeError("kernel and stride must be >= 1");
  if (padded < kernel) {
    throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input extent " +
                     std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

template <typename T>
void extract_patch(const Tensor& input, std::size_t n, std::size_t oy, std::size_t ox,
                   const ConvGeometry& geom, std::span<T> out) {
  const std::size_t channels = input.dim(1), height = input.dim(2), width = input.dim(3);
  const std::size_t k = geom.kernel;
  std::size_t r = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) -
                      static_cast<std::ptrdiff_t>(geom.padding);
      for (std::size_t kx = 0; kx < k; ++kx, ++r) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) -
                        static_cast<std::ptrdiff_t>(geom.padding);
        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(height) &&
                            ix < static_cast<std::ptrdiff_t>(width);
        out[r] = inside ? static_cast<T>(input.at4(n, c, static_cast<std::size_t>(iy),
                                                   static_cast<std::size_t>(ix)))
                        : T{0};
      }
    }
  }
}

template void extract_patch(const Tensor&, std::size_t, std::size_t, std::size_t,
                            const ConvGeometry&, std::span<float>);
template void extract_patch(const Tensor&, std::size_t, std::size_t, std::size_t,
                            const ConvGeometry&, std::span<double>);

Tensor im2col(const Tensor& input, const ConvGeometry& geom) {
  if (input.rank() != 4) throw ShapeError("im2col expects an NCHW tensor, got " + shape_string(input.shape()));
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t out_h = geom.out_extent(input.dim(2));
  const std::size_t out_w = geom.out_extent(input.dim(3));
  const std::size_t rows = channels * geom.kernel * geom.kernel;
  const std::size_t positions = out_h * out_w;
  Tensor cols = Tensor::matrix(rows, positions * batch);
  std::vector<float> patch(rows);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        extract_patch<float>(input, n, oy, ox, geom, patch);
        const std::size_t j = n * positions + oy * out_w + ox;
        for (std::size_t r = 0; r < rows; ++r) cols(r, j) = patch[r];
      }
    }
  }
  return cols;
}

LowerTriangular cholesky(const Tensor64& m) {
  require_matrix(m.shape(), "cholesky");
  if (m.rows() != m.cols()) throw ShapeError("cholesky expects a square matrix, got " + shape_string(m.shape()));
  const std::size_t n = m.rows();

  double scale = 0.0;
  for (double v : m.values()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > kSymmetryTolerance * scale) {
        throw ShapeError("cholesky input is not symmetric within tolerance");
      }
    }
  }

  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, m(i, i));
  const double pivot_floor = kPivotTolerance * max_diag;

  LowerTriangular l(n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = m(j, j);
    for (std::size_t p = 0; p < j; ++p) pivot -= l(j, p) * l(j, p);
    if (!(pivot > pivot_floor)) {
      throw SingularError("cholesky: non-positive pivot at row " + std::to_string(j) +
                          " (matrix not positive-definite)");
    }
    const double d = std::sqrt(pivot);
    l(j, j) = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.5 * (m(i, j) + m(j, i));
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / d;
    }
  }
  return l;
}

LowerTriangular tri_inverse(const LowerTriangular& l) {
  const std::size_t n = l.dim();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(l(i, i)));
  for (std::size_t i = 0; i < n; ++i) {
    if (!(l(i, i) > kTriDiagonalTolerance * max_diag)) {
      throw SingularError("tri_inverse: near-zero diagonal entry at row " + std::to_string(i));
    }
  }
  LowerTriangular inv(n);
  // Column-by-column forward substitution of L x = e_j.
  for (std::size_t j = 0; j < n; ++j) {
    inv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t p = j; p < i; ++p) s += l(i, p) * inv(p, j);
      inv(i, j) = -s / l(i, i);
    }
  }
  return inv;
}

void forward_solve(const LowerTriangular& l, Tensor64& b) {
  if (b.rank() != 2 || b.rows() != l.dim()) throw ShapeError("forward_solve: row count mismatch");
  const std::size_t n = l.dim(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* bi = b.data() + i * m;
    for (std::size_t p = 0; p < i; ++p) {
      const double lip = l(i, p);
      const double* bp = b.data() + p * m;
      for (std::size_t c = 0; c < m; ++c) bi[c] -= lip * bp[c];
    }
    const double d = l(i, i);
    for (std::size_t c = 0; c < m; ++c) bi[c] /= d;
  }
}

void backward_solve_transposed(const LowerTriangular& l, Tensor64& b) {
  if (b.rank() != 2 || b.rows() != l.dim()) throw ShapeError("backward_solve: row count mismatch");
  const std::size_t n = l.dim(), m = b.cols();
  for (std::size_t ii = n; ii-- > 0;) {
    double* bi = b.data() + ii * m;
    for (std::size_t p = ii + 1; p < n; ++p) {
      const double lpi = l(p, ii);
      const double* bp = b.data() + p * m;
      for (std::size_t c = 0; c < m; ++c) bi[c] -= lpi * bp[c];
    }
    const double d = l(ii, ii);
    for (std::size_t c = 0; c < m; ++c) bi[c] /= d;
  }
}

Tensor64 solve_spd(const Tensor64& a, const Tensor64& b) {
  const LowerTriangular l = cholesky(a);
  Tensor64 x = b;
  forward_solve(l, x);
  backward_solve_transposed(l, x);
  return x;
}

double frobenius_norm(const Tensor64& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace cprune
