#pragma once

#include <cstddef>
#include <span>

#include "cprune/tensor.hpp"

namespace cprune {

/// Standard product of two 2-D tensors. Each output entry is accumulated in
/// a fixed inner-index order; rows may be spread over `workers` threads
/// without changing a single bit of the result.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t workers = 1);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& m);

/// Convolution geometry for im2col and conv layers.
struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_extent(std::size_t in_extent) const;
  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// Patch matrix of an NCHW input.
///
/// Row r = c*k*k + ky*k + kx is input channel c at kernel offset (ky, kx);
/// the rows of channel c are therefore the contiguous block
/// [c*k*k, (c+1)*k*k). Every module that maps channels to flattened rows
/// relies on this ordering. Column j = n*(H_out*W_out) + oy*W_out + ox.
Tensor im2col(const Tensor& input, const ConvGeometry& geom);

/// Writes the flattened receptive field of output position (oy, ox) of image
/// n into `out` (length C*k*k) using the im2col row convention.
template <typename T>
void extract_patch(const Tensor& input, std::size_t n, std::size_t oy, std::size_t ox,
                   const ConvGeometry& geom, std::span<T> out);

/// Cholesky factor of a symmetric positive-definite matrix. The input is
/// symmetrized as (m + m^T)/2 first. Throws ShapeError when m is not square
/// or asymmetric beyond 1e-9 relative, SingularError on a pivot that is not
/// positive within tolerance.
LowerTriangular cholesky(const Tensor64& m);

/// Inverse of a lower-triangular matrix (itself lower-triangular).
LowerTriangular tri_inverse(const LowerTriangular& l);

/// Solves L X = B in place (B is dim x m).
void forward_solve(const LowerTriangular& l, Tensor64& b);
/// Solves L^T X = B in place (B is dim x m).
void backward_solve_transposed(const LowerTriangular& l, Tensor64& b);

/// Solves A X = B for SPD A via cholesky and two triangular solves.
Tensor64 solve_spd(const Tensor64& a, const Tensor64& b);

double frobenius_norm(const Tensor64& m);

}  // namespace cprune
