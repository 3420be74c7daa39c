#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "cprune/dataset.hpp"
#include "cprune/model.hpp"

namespace cprune {

/// The batch normalization (if any) and activation applied to a layer's
/// output; its derivative weights each sample of the reconstruction loss.
struct ActivationContext {
  struct Norm {
    std::vector<double> gamma, beta, mean, var;
    double epsilon = 1e-5;
  };
  std::optional<Norm> bn;
  ActivationKind act = ActivationKind::Identity;

  /// Context of `layer`: an immediately following BatchNorm, then an
  /// Activation if one follows; Identity otherwise.
  static ActivationContext for_layer(const Model& model, std::size_t layer);
};

/// Per-output-channel derivative of the post-layer transform at y.
std::vector<double> activation_derivative(const ActivationContext& ctx, std::span<const double> y);

/// Sample weight: mean over output channels of the squared derivative.
double activation_weight(const ActivationContext& ctx, std::span<const double> y);

/// Weighted mean and covariance of a layer's flattened input rows.
struct LayerStatistics {
  std::size_t dim = 0;
  std::size_t rows_per_channel = 1;
  std::vector<double> mu;
  Tensor64 sigma;  // dim x dim, symmetric
  double weight_sum = 0.0;
  double sample_count = 0.0;

  std::size_t channels() const { return dim / rows_per_channel; }
  /// Largest diagonal variance among a channel's rows.
  double channel_variance(std::size_t channel) const;
};

/// All activations were dead: the weighted measure has no mass.
class DeadActivationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw weighted sums; mergeable before finalization.
class StatisticsAccumulator {
 public:
  StatisticsAccumulator(std::size_t dim, std::size_t rows_per_channel);

  void add(std::span<const double> x, double weight);
  /// Adds the raw sums of `other` (same dim and channel layout).
  void merge(const StatisticsAccumulator& other);
  /// mu = S_x / W, sigma = S_xx / W - mu mu^T. Throws DeadActivationError
  /// when the weight sum is below 1e-12.
  LayerStatistics finalize() const;

  std::size_t dim() const { return dim_; }
  std::size_t rows_per_channel() const { return rows_per_channel_; }
  double weight_sum() const { return weight_sum_; }
  double sample_count() const { return sample_count_; }
  const std::vector<double>& weighted_sum() const { return sum_x_; }
  /// Upper triangle (row-major, j >= i) of the weighted outer-product sum.
  const std::vector<double>& weighted_outer() const { return sum_xx_; }

  friend bool operator==(const StatisticsAccumulator&, const StatisticsAccumulator&) = default;

 private:
  std::size_t dim_;
  std::size_t rows_per_channel_;
  std::vector<double> sum_x_;
  std::vector<double> sum_xx_;
  double weight_sum_ = 0.0;
  double sample_count_ = 0.0;
};

StatisticsAccumulator merge_statistics(const StatisticsAccumulator& a, const StatisticsAccumulator& b);

struct StatisticsOptions {
  std::size_t patches_per_image = 32;
  std::uint64_t seed = 0;
  /// false: every sample gets weight 1 (fallback for dead layers).
  bool weighted = true;
  std::size_t workers = 1;
};

/// Images are processed in fixed chunks of this many examples; chunk sums
/// are merged in index order, so results do not depend on worker count.
inline constexpr std::size_t kStatisticsChunk = 16;

StatisticsAccumulator accumulate_statistics(const Model& model, const Dataset& data, std::size_t layer,
                                            const StatisticsOptions& opts);

LayerStatistics estimate_statistics(const Model& model, const Dataset& data, std::size_t layer,
                                    const StatisticsOptions& opts = {});

/// Spatial positions sampled from an image with `available` positions.
std::vector<std::size_t> sample_positions(std::size_t available, std::size_t wanted, std::uint64_t seed);

inline constexpr std::uint32_t kStatisticsFormatVersion = 1;

/// "CPST" | u32 version | u64 dim | u64 rows_per_channel | f64 mu[dim] |
/// f64 sigma[dim*dim] | f64 weight_sum | f64 sample_count
void save_statistics(const LayerStatistics& stats, const std::filesystem::path& path);
LayerStatistics load_statistics(const std::filesystem::path& path);
std::string serialize_statistics(const LayerStatistics& stats);
LayerStatistics deserialize_statistics(const std::string& bytes);

}  // namespace cprune
