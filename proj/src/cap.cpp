#include "cprune/cap.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cprune/compensation.hpp"

namespace cprune {

namespace {

constexpr double kRadicandTolerance = 1e-10;

}  // namespace

double reconstruction_loss(const Tensor64& w, const LayerStatistics& stats, std::span<const std::size_t> channels) {
  if (w.rank() != 2 || w.rows() != stats.dim) throw ShapeError("reconstruction_loss: weight rows differ from dim");
  const Tensor64 sigma_w = matmul(stats.sigma, w);
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += w[i] * sigma_w[i];
  if (channels.empty()) return std::max(total, 0.0);

  const auto rows = channel_rows({channels.begin(), channels.end()}, stats.rows_per_channel);
  const LowerTriangular l = factor_with_ridge(submatrix(stats.sigma, rows, rows));
  // Sigma_SC W is the row subset of Sigma W.
  Tensor64 z = Tensor64::matrix(rows.size(), w.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t o = 0; o < w.cols(); ++o) z(i, o) = sigma_w(rows[i], o);
  forward_solve(l, z);
  double explained = 0.0;
  for (double v : z.values()) explained += v * v;
  return std::max(total - explained, 0.0);
}

double reconstruction_loss(const Tensor64& w, const LayerStatistics& stats, const Selection& sel) {
  return reconstruction_loss(w, stats, sel.retained());
}

CapProblem::CapProblem(const Tensor64& w, const LayerStatistics& stats)
    : stats_(&stats), w_(w), sigma_w_(matmul(stats.sigma, w)) {
  if (w.rank() != 2 || w.rows() != stats.dim) throw ShapeError("CapProblem: weight rows differ from dim");
  total_ = 0.0;
  for (std::size_t i = 0; i < w_.size(); ++i) total_ += w_[i] * sigma_w_[i];
}

CholeskyState::CholeskyState(const CapProblem& problem) : problem_(&problem) {}

std::span<const double> CholeskyState::proj_column(std::size_t j) const {
  const std::size_t n = problem_->outputs();
  return std::span<const double>(proj_).subspan(j * n, n);
}

double CholeskyState::loss() const { return std::max(problem_->total_energy() - captured_, 0.0); }

RowExtension CholeskyState::compute_extension(std::span<const std::size_t> rows) const {
  const Tensor64& sigma = problem_->stats().sigma;
  const Tensor64& sigma_w = problem_->sigma_w();
  const std::size_t outputs = problem_->outputs();
  const std::size_t base = dim();

  RowExtension ext;
  ext.l_inv_rows.reserve(rows.size());
  ext.proj_columns.reserve(rows.size());

  auto l_row = [&](std::size_t p) -> std::span<const double> {
    return p < base ? l_inv_.row(p) : std::span<const double>(ext.l_inv_rows[p - base]);
  };
  auto included_row = [&](std::size_t q) { return q < base ? row_map_[q] : rows[q - base]; };
  auto proj_col = [&](std::size_t p) -> std::span<const double> {
    return p < base ? proj_column(p) : std::span<const double>(ext.proj_columns[p - base]);
  };

  std::vector<double> u;
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const std::size_t i = rows[t];
    const std::size_t m = base + t;

    // u = L^-1 Sigma_{S,i}, so that Sigma_iS Sigma_SS^-1 Sigma_Si = |u|^2.
    u.assign(m, 0.0);
    double explained = 0.0;
    for (std::size_t p = 0; p < m; ++p) {
      const auto lp = l_row(p);
      double s = 0.0;
      for (std::size_t q = 0; q <= p; ++q) s += lp[q] * sigma(included_row(q), i);
      u[p] = s;
      explained += s * s;
    }
    const double sigma_ii = sigma(i, i);
    const double radicand = sigma_ii - explained;
    if (!(radicand > kRadicandTolerance * sigma_ii)) {
      ext.singular = true;
      ext.gain = 0.0;
      ext.l_inv_rows.clear();
      ext.proj_columns.clear();
      return ext;
    }
    const double a = 1.0 / std::sqrt(radicand);

    // r = -a u^T L^-1
    std::vector<double> new_row(m + 1, 0.0);
    for (std::size_t p = 0; p < m; ++p) {
      const double up = u[p];
      if (up == 0.0) continue;
      const auto lp = l_row(p);
      for (std::size_t q = 0; q <= p; ++q) new_row[q] += up * lp[q];
    }
    for (std::size_t q = 0; q < m; ++q) new_row[q] *= -a;
    new_row[m] = a;

    // New projection column W^T Sigma_{C,S} r^T + a W^T Sigma_{C,i},
    // equivalently a (W^T Sigma_{C,i} - proj u).
    std::vector<double> col(outputs);
    const double* bi = sigma_w.data() + i * outputs;
    for (std::size_t o = 0; o < outputs; ++o) col[o] = bi[o];
    for (std::size_t p = 0; p < m; ++p) {
      const double up = u[p];
      if (up == 0.0) continue;
      const auto pc = proj_col(p);
      for (std::size_t o = 0; o < outputs; ++o) col[o] -= up * pc[o];
    }
    for (auto& v : col) {
      v *= a;
      ext.gain += v * v;
    }
    ext.l_inv_rows.push_back(std::move(new_row));
    ext.proj_columns.push_back(std::move(col));
  }
  return ext;
}

void CholeskyState::commit(std::span<const std::size_t> rows, const RowExtension& ext) {
  if (ext.singular || ext.l_inv_rows.size() != rows.size()) throw std::logic_error("cannot commit a singular extension");
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto& r = ext.l_inv_rows[t];
    l_inv_.append_row(std::span<const double>(r).first(r.size() - 1), r.back());
    row_map_.push_back(rows[t]);
    proj_.insert(proj_.end(), ext.proj_columns[t].begin(), ext.proj_columns[t].end());
  }
  captured_ += ext.gain;
}

bool CholeskyState::try_extend(std::span<const std::size_t> rows) {
  const RowExtension ext = compute_extension(rows);
  if (ext.singular) return false;
  commit(rows, ext);
  return true;
}

std::optional<CholeskyState> extend_inverse(const CholeskyState& state, std::span<const std::size_t> rows) {
  CholeskyState next = state;
  if (!next.try_extend(rows)) return std::nullopt;
  return next;
}

std::optional<double> greedy_gain(const CholeskyState& state, std::size_t channel) {
  const auto rows = channel_rows({channel}, state.problem().stats().rows_per_channel);
  const RowExtension ext = state.compute_extension(rows);
  if (ext.singular) return std::nullopt;
  return ext.gain;
}

CapResult cap_select(const Tensor64& w, const LayerStatistics& stats, double sigma, std::size_t workers) {
  const std::size_t channels = stats.channels();
  const std::size_t target = retained_count(sigma, channels);
  const CapProblem problem(w, stats);

  double max_diag = 0.0;
  for (std::size_t i = 0; i < stats.dim; ++i) max_diag = std::max(max_diag, stats.sigma(i, i));
  std::vector<std::size_t> admissible;
  for (std::size_t c = 0; c < channels; ++c) {
    if (stats.channel_variance(c) >= kDegenerateVariance * max_diag && stats.channel_variance(c) > 0.0) {
      admissible.push_back(c);
    }
  }
  if (admissible.empty()) throw SingularError("cap_select: every channel has near-zero variance");

  CholeskyState state(problem);
  std::vector<std::size_t> order;
  std::vector<std::optional<double>> gains;
  while (order.size() < target && !admissible.empty()) {
    gains.assign(admissible.size(), std::nullopt);
    parallel_for(admissible.size(), workers, [&](std::size_t j) { gains[j] = greedy_gain(state, admissible[j]); });

    std::optional<std::size_t> best;
    std::vector<std::size_t> still_admissible;
    for (std::size_t j = 0; j < admissible.size(); ++j) {
      // A channel singular against S stays singular against any superset.
      if (!gains[j]) continue;
      still_admissible.push_back(admissible[j]);
      if (!best || *gains[j] > *gains[*best]) best = j;
    }
    if (!best) break;
    const std::size_t chosen = admissible[*best];
    const auto rows = channel_rows({chosen}, stats.rows_per_channel);
    if (!state.try_extend(rows)) throw std::logic_error("cap_select: accepted channel became singular");
    order.push_back(chosen);
    still_admissible.erase(std::find(still_admissible.begin(), still_admissible.end(), chosen));
    admissible = std::move(still_admissible);
  }

  return CapResult{Selection::from_unsorted(order, channels, stats.rows_per_channel), order, state.loss()};
}

Selection baseline_select(BaselineMethod method, const Tensor64& w, std::size_t rows_per_channel, double sigma,
                          std::uint64_t seed) {
  if (w.rank() != 2 || rows_per_channel == 0 || w.rows() % rows_per_channel != 0) {
    throw ShapeError("baseline_select: weight rows must be a multiple of rows_per_channel");
  }
  const std::size_t channels = w.rows() / rows_per_channel;
  const std::size_t target = retained_count(sigma, channels);
  std::vector<std::size_t> picked;
  if (method == BaselineMethod::L2) {
    std::vector<double> score(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t r = c * rows_per_channel; r < (c + 1) * rows_per_channel; ++r)
        for (std::size_t o = 0; o < w.cols(); ++o) score[c] += w(r, o) * w(r, o);
    std::vector<std::size_t> idx(channels);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    picked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(target));
  } else {
    const auto perm = seeded_permutation(channels, seed);
    picked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(target));
  }
  return Selection::from_unsorted(std::move(picked), channels, rows_per_channel);
}

}  // namespace cprune
