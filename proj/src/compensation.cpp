#include "cprune/compensation.hpp"

#include <algorithm>

namespace cprune {

LowerTriangular factor_with_ridge(Tensor64 sigma_ss) {
  try {
    return cholesky(sigma_ss);
  } catch (const SingularError&) {
    double max_diag = 0.0;
    for (std::size_t i = 0; i < sigma_ss.rows(); ++i) max_diag = std::max(max_diag, sigma_ss(i, i));
    const double ridge = kRidgeFraction * max_diag;
    for (std::size_t i = 0; i < sigma_ss.rows(); ++i) sigma_ss(i, i) += ridge;
    return cholesky(sigma_ss);
  }
}

Tensor64 submatrix(const Tensor64& m, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  Tensor64 out = Tensor64::matrix(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(rows[i], cols[j]);
  return out;
}

CompensationResult compensate(const Tensor64& w, const std::vector<double>& b, const LayerStatistics& stats,
                              const Selection& sel) {
  if (w.rank() != 2 || w.rows() != stats.dim) {
    throw ShapeError("compensate: weights have " + shape_string(w.shape()) + ", statistics dim is " +
                     std::to_string(stats.dim));
  }
  if (b.size() != w.cols()) throw ShapeError("compensate: bias length differs from output count");
  if (sel.all_channels() * sel.rows_per_channel() != stats.dim ||
      sel.rows_per_channel() != stats.rows_per_channel) {
    throw ShapeError("compensate: selection layout does not match statistics");
  }
  const auto rows = sel.rows();
  std::vector<std::size_t> all(stats.dim);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  const LowerTriangular l = factor_with_ridge(submatrix(stats.sigma, rows, rows));
  // Sigma_SC W, then two triangular solves.
  Tensor64 w_hat = matmul(submatrix(stats.sigma, rows, all), w);
  forward_solve(l, w_hat);
  backward_solve_transposed(l, w_hat);

  const std::size_t outputs = w.cols();
  std::vector<double> b_hat(b);
  for (std::size_t o = 0; o < outputs; ++o) {
    double s = 0.0;
    for (std::size_t r = 0; r < stats.dim; ++r) s += stats.mu[r] * w(r, o);
    for (std::size_t i = 0; i < rows.size(); ++i) s -= stats.mu[rows[i]] * w_hat(i, o);
    b_hat[o] += s;
  }
  return {std::move(w_hat), std::move(b_hat)};
}

Model prune_and_compensate(const Model& model, std::size_t layer, const LayerStatistics& stats,
                           const Selection& sel) {
  const Tensor64 w = flattened_weights(model, layer);
  const auto result = compensate(w, bias_vector(model, layer), stats, sel);
  Model pruned = prune_layer(model, layer, sel);
  const Tensor w_hat = unflatten_weights(pruned, layer, result.w_hat);
  const std::size_t outputs = result.b_hat.size();
  std::vector<float> b(result.b_hat.begin(), result.b_hat.end());
  return apply_compensation(pruned, layer, w_hat, Tensor({outputs}, std::move(b)));
}

}  // namespace cprune
