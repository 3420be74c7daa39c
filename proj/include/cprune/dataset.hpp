#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cprune/errors.hpp"
#include "cprune/tensor.hpp"

namespace cprune {

/// Labeled or unlabeled images, N x C x H x W.
struct Dataset {
  Tensor images;
  std::optional<std::vector<std::uint32_t>> labels;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
  /// Examples at the given indices, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

enum class DatasetFormat { Cifar10Binary, RawTensor };

DatasetFormat parse_dataset_format(const std::string& name);

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format);
Dataset parse_cifar10(const std::string& bytes);
Dataset parse_raw_tensor(const std::string& bytes);

/// "CPDS" | u32 version | u32 N, C, H, W | u8 has_labels | f32 images | u32 labels
void save_raw_tensor(const Dataset& data, const std::filesystem::path& path);
std::string serialize_raw_tensor(const Dataset& data);

/// Unlabeled i.i.d. standard-normal images from a seeded generator.
Dataset synth_normal(std::size_t n, std::size_t channels, std::size_t height, std::size_t width,
                     std::uint64_t seed);

/// Seeded permutation followed by a contiguous partition. Every split but
/// the last takes floor(fraction * N) examples; the last takes the rest.
std::vector<Dataset> split(const Dataset& data, const std::vector<double>& fractions, std::uint64_t seed);

/// Derives an independent stream seed from a base seed and a stream id.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Uniform integer in [0, n) by rejection sampling; the draw sequence is
/// fully specified by the engine output, unlike std::uniform_int_distribution.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

}  // namespace cprune
