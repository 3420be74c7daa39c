#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprune/selection.hpp"
#include "cprune/statistics.hpp"

namespace cprune {

/// Reconstruction loss left after compensating a layer that keeps only
/// `channels`:
///   sum_k w_k^T Sigma_CC w_k - w_k^T Sigma_CS Sigma_SS^-1 Sigma_SC w_k
/// evaluated with Cholesky solves and clamped at 0. Sigma_SS is factored
/// with the same ridge fallback as compensate, so the value matches the
/// compensation actually applied. An empty channel list gives the full
/// energy sum_k w_k^T Sigma_CC w_k.
double reconstruction_loss(const Tensor64& w, const LayerStatistics& stats, std::span<const std::size_t> channels);
double reconstruction_loss(const Tensor64& w, const LayerStatistics& stats, const Selection& sel);

/// Quantities shared by every step of one greedy selection. Holds a
/// reference to `stats`, which must outlive it.
class CapProblem {
 public:
  CapProblem(const Tensor64& w, const LayerStatistics& stats);

  const LayerStatistics& stats() const { return *stats_; }
  const Tensor64& weights() const { return w_; }
  /// Sigma W (dim x N); row i equals (W^T Sigma_{C,i})^T.
  const Tensor64& sigma_w() const { return sigma_w_; }
  /// Loss of the empty selection.
  double total_energy() const { return total_; }
  std::size_t outputs() const { return w_.cols(); }

 private:
  const LayerStatistics* stats_;
  Tensor64 w_;
  Tensor64 sigma_w_;
  double total_;
};

/// Rows appended to a state by one tentative channel extension.
struct RowExtension {
  std::vector<std::vector<double>> l_inv_rows;  // each includes its diagonal entry
  std::vector<std::vector<double>> proj_columns;  // each of length N
  double gain = 0.0;
  bool singular = false;
};

/// Incrementally maintained inverse Cholesky factor L_S^-1 of Sigma_SS and
/// the projections W^T Sigma_{C,S} (L_S^-1)^T, one column per included row.
class CholeskyState {
 public:
  explicit CholeskyState(const CapProblem& problem);

  const CapProblem& problem() const { return *problem_; }
  const LowerTriangular& l_inv() const { return l_inv_; }
  const std::vector<std::size_t>& row_map() const { return row_map_; }
  std::size_t dim() const { return row_map_.size(); }
  std::span<const double> proj_column(std::size_t j) const;
  /// ||proj||_F^2 = energy recovered by the current rows.
  double captured() const { return captured_; }
  /// reconstruction loss of the current rows, clamped at 0.
  double loss() const;

  /// Appends `rows` one at a time. For each row i,
  ///   a = 1 / sqrt(Sigma_ii - Sigma_iS Sigma_SS^-1 Sigma_Si)
  ///   r = -a Sigma_iS Sigma_SS^-1
  /// and [r, a] becomes the new bottom row of L^-1. A radicand at or below
  /// 1e-10 * Sigma_ii marks the rows as singular; nothing is appended then.
  RowExtension compute_extension(std::span<const std::size_t> rows) const;
  void commit(std::span<const std::size_t> rows, const RowExtension& ext);
  /// compute_extension + commit; returns false (state unchanged) if singular.
  bool try_extend(std::span<const std::size_t> rows);

 private:
  const CapProblem* problem_;
  LowerTriangular l_inv_;
  std::vector<std::size_t> row_map_;
  std::vector<double> proj_;  // column-major, N entries per column
  double captured_ = 0.0;
};

/// Value-returning form of CholeskyState::try_extend; nullopt signals a
/// singular extension.
std::optional<CholeskyState> extend_inverse(const CholeskyState& state, std::span<const std::size_t> rows);

/// Exact decrease of the reconstruction loss from adding `channel`'s rows;
/// nullopt when the channel would make Sigma_SS singular.
std::optional<double> greedy_gain(const CholeskyState& state, std::size_t channel);

struct CapResult {
  Selection selection;
  /// Channels in the order the greedy search added them.
  std::vector<std::size_t> order;
  double loss = 0.0;
};

/// Channels whose largest row variance is below this fraction of the
/// largest diagonal entry are never selected.
inline constexpr double kDegenerateVariance = 1e-8;

/// Greedy compensation-aware selection: starting from the empty set, add
/// the admissible channel with the largest greedy_gain (lowest index on
/// ties) until retained_count(sigma) channels are kept or no admissible
/// channel remains. Throws SingularError when every channel is degenerate.
CapResult cap_select(const Tensor64& w, const LayerStatistics& stats, double sigma, std::size_t workers = 1);

enum class BaselineMethod { L2, Random };

/// Magnitude (sum of squared weights over a channel's rows) or seeded
/// random selection. Random selections for one seed are nested across
/// sparsity rates: they are prefixes of one seeded permutation.
Selection baseline_select(BaselineMethod method, const Tensor64& w, std::size_t rows_per_channel, double sigma,
                          std::uint64_t seed = 0);

}  // namespace cprune
