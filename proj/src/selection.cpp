#include "cprune/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cprune {

Selection::Selection(std::vector<std::size_t> retained, std::size_t all_channels,
                     std::size_t rows_per_channel)
    : retained_(std::move(retained)),
      all_channels_(all_channels),
      rows_per_channel_(rows_per_channel) {
  if (retained_.empty()) throw std::invalid_argument("selection must retain at least one channel");
  if (rows_per_channel_ == 0) throw std::invalid_argument("rows_per_channel must be positive");
  for (std::size_t i = 0; i < retained_.size(); ++i) {
    if (retained_[i] >= all_channels_) {
      throw std::invalid_argument("retained channel " + std::to_string(retained_[i]) +
                                  " out of range [0, " + std::to_string(all_channels_) + ")");
    }
    if (i > 0 && retained_[i] <= retained_[i - 1]) {
      throw std::invalid_argument("retained channels must be strictly increasing");
    }
  }
}

Selection Selection::all(std::size_t all_channels, std::size_t rows_per_channel) {
  std::vector<std::size_t> idx(all_channels);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return Selection(std::move(idx), all_channels, rows_per_channel);
}

Selection Selection::from_unsorted(std::vector<std::size_t> channels, std::size_t all_channels,
                                   std::size_t rows_per_channel) {
  std::sort(channels.begin(), channels.end());
  channels.erase(std::unique(channels.begin(), channels.end()), channels.end());
  return Selection(std::move(channels), all_channels, rows_per_channel);
}

double Selection::sparsity() const {
  return 1.0 - static_cast<double>(retained_.size()) / static_cast<double>(all_channels_);
}

std::vector<std::size_t> Selection::rows() const { return channel_rows(retained_, rows_per_channel_); }

std::vector<std::size_t> channel_rows(const std::vector<std::size_t>& channels,
                                      std::size_t rows_per_channel) {
  std::vector<std::size_t> rows;
  rows.reserve(channels.size() * rows_per_channel);
  for (auto c : channels)
    for (std::size_t r = 0; r < rows_per_channel; ++r) rows.push_back(c * rows_per_channel + r);
  return rows;
}

std::size_t retained_count(double sigma, std::size_t channels) {
  if (!(sigma >= 0.0 && sigma < 1.0)) throw std::invalid_argument("sparsity must lie in [0, 1)");
  // Slack absorbs representation error such as (1 - 0.3) * 10 = 6.999...
  const double keep = std::floor((1.0 - sigma) * static_cast<double>(channels) + 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(keep));
}

}  // namespace cprune
