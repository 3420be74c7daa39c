#pragma once

#include <vector>

#include "cprune/model.hpp"
#include "cprune/selection.hpp"
#include "cprune/statistics.hpp"

namespace cprune {

/// Re-fitted weights of the retained rows and the output bias that absorbs
/// the mean shift.
struct CompensationResult {
  Tensor64 w_hat;  // (|S| * rows_per_channel) x N
  std::vector<double> b_hat;  // N
};

inline constexpr double kRidgeFraction = 1e-10;

/// Cholesky factor of `sigma_ss`; if that fails, retries once with
/// kRidgeFraction * max(diag) added to the diagonal.
LowerTriangular factor_with_ridge(Tensor64 sigma_ss);

/// Sub-matrix of `m` at the given row and column indices.
Tensor64 submatrix(const Tensor64& m, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols);

/// Closed-form least-squares recovery of a pruned layer under the weighted
/// statistics:
///   W_hat = Sigma_SS^-1 Sigma_SC W
///   b_hat = mu_C^T W + b - mu_S^T W_hat
/// Sigma_SS is factored by factor_with_ridge; SingularError propagates if
/// the retry fails too.
CompensationResult compensate(const Tensor64& w, const std::vector<double>& b, const LayerStatistics& stats,
                              const Selection& sel);

/// Prunes the input channels of `layer` to `sel` and installs the
/// compensated weights and bias.
Model prune_and_compensate(const Model& model, std::size_t layer, const LayerStatistics& stats,
                           const Selection& sel);

}  // namespace cprune
