#pragma once

#include <cstddef>
#include <vector>

namespace cprune {

/// Retained input channels of one layer, plus the channel -> flattened-row
/// mapping. Channel c owns rows [c*rows_per_channel, (c+1)*rows_per_channel).
class Selection {
 public:
  /// Throws std::invalid_argument unless `retained` is strictly increasing,
  /// non-empty and within [0, all_channels).
  Selection(std::vector<std::size_t> retained, std::size_t all_channels,
            std::size_t rows_per_channel);

  static Selection all(std::size_t all_channels, std::size_t rows_per_channel);
  /// Sorts and deduplicates `channels` before validating.
  static Selection from_unsorted(std::vector<std::size_t> channels, std::size_t all_channels,
                                 std::size_t rows_per_channel);

  const std::vector<std::size_t>& retained() const { return retained_; }
  std::size_t all_channels() const { return all_channels_; }
  std::size_t rows_per_channel() const { return rows_per_channel_; }
  std::size_t size() const { return retained_.size(); }
  bool is_full() const { return retained_.size() == all_channels_; }
  double sparsity() const;

  /// Flattened row indices of the retained channels, in channel order.
  std::vector<std::size_t> rows() const;

  friend bool operator==(const Selection&, const Selection&) = default;

 private:
  std::vector<std::size_t> retained_;
  std::size_t all_channels_;
  std::size_t rows_per_channel_;
};

/// Rows of an arbitrary channel list, in the order given.
std::vector<std::size_t> channel_rows(const std::vector<std::size_t>& channels,
                                      std::size_t rows_per_channel);

/// Retained count for sparsity rate sigma: max(1, floor((1 - sigma) * channels)).
std::size_t retained_count(double sigma, std::size_t channels);

}  // namespace cprune
