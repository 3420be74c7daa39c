#include "cprune/dataset.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "binary_io.hpp"

namespace cprune {

namespace {

constexpr std::string_view kRawMagic = "CPDS";
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = indices.size();
  std::vector<float> data;
  data.reserve(indices.size() * per);
  std::optional<std::vector<std::uint32_t>> sub_labels;
  if (labels) sub_labels.emplace();
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("dataset subset index out of range");
    data.insert(data.end(), images.data() + i * per, images.data() + (i + 1) * per);
    if (labels) sub_labels->push_back((*labels)[i]);
  }
  return Dataset{Tensor(std::move(shape), std::move(data)), std::move(sub_labels)};
}

DatasetFormat parse_dataset_format(const std::string& name) {
  if (name == "cifar10" || name == "cifar10-binary") return DatasetFormat::Cifar10Binary;
  if (name == "raw" || name == "raw-tensor") return DatasetFormat::RawTensor;
  throw ConfigError("unknown dataset format '" + name + "' (expected cifar10 or raw)");
}

Dataset parse_cifar10(const std::string& bytes) {
  if (bytes.empty()) throw FormatError("cifar10: empty file");
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("cifar10: truncated record (file size " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Tensor images({n, 3, kCifarSide, kCifarSide});
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + i * kCifarRecordBytes;
    if (rec[0] >= 10) {
      throw FormatError("cifar10: record " + std::to_string(i) + " has label " + std::to_string(rec[0]) + " >= 10");
    }
    labels[i] = rec[0];
    float* dst = images.data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) dst[p] = static_cast<float>(rec[1 + p]) / 255.0f;
  }
  return Dataset{std::move(images), std::move(labels)};
}

Dataset parse_raw_tensor(const std::string& bytes) {
  detail::ByteReader r(bytes, "raw-tensor file");
  if (bytes.size() < 4 || r.raw(4) != kRawMagic) throw FormatError("raw-tensor: bad magic (expected CPDS)");
  const auto version = r.uint<std::uint32_t>();
  if (version != kDatasetFormatVersion) throw FormatError("raw-tensor: unsupported version " + std::to_string(version));
  const std::size_t n = r.uint<std::uint32_t>();
  const std::size_t c = r.uint<std::uint32_t>();
  const std::size_t h = r.uint<std::uint32_t>();
  const std::size_t w = r.uint<std::uint32_t>();
  const auto has_labels = r.uint<std::uint8_t>();
  if (n == 0 || c == 0 || h == 0 || w == 0) throw FormatError("raw-tensor: header has a zero dimension");
  if (has_labels > 1) throw FormatError("raw-tensor: has_labels flag must be 0 or 1");
  const std::size_t count = n * c * h * w;
  const std::size_t need = count * 4 + (has_labels ? n * 4 : 0);
  if (r.remaining() != need) {
    throw FormatError("raw-tensor: payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(need));
  }
  std::vector<float> data(count);
  for (auto& v : data) {
    v = r.f32();
    if (!std::isfinite(v)) throw FormatError("raw-tensor: non-finite pixel value");
  }
  Dataset ds{Tensor({n, c, h, w}, std::move(data)), std::nullopt};
  if (has_labels) {
    ds.labels.emplace(n);
    for (auto& l : *ds.labels) l = r.uint<std::uint32_t>();
  }
  return ds;
}

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  const std::string bytes = detail::read_file(path);
  return format == DatasetFormat::Cifar10Binary ? parse_cifar10(bytes) : parse_raw_tensor(bytes);
}

std::string serialize_raw_tensor(const Dataset& data) {
  const auto& s = data.images.shape();
  if (s.size() != 4) throw ShapeError("raw-tensor datasets must be N x C x H x W");
  detail::ByteWriter w;
  w.raw(kRawMagic);
  w.uint<std::uint32_t>(kDatasetFormatVersion);
  for (auto d : s) w.uint<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.uint<std::uint8_t>(data.labels ? 1 : 0);
  for (float v : data.images.values()) w.f32(v);
  if (data.labels)
    for (auto l : *data.labels) w.uint<std::uint32_t>(l);
  return std::move(w.str());
}

void save_raw_tensor(const Dataset& data, const std::filesystem::path& path) {
  detail::write_file(path, serialize_raw_tensor(data));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index over an empty range");
  const std::uint64_t range = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % range);
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  return perm;
}

Dataset synth_normal(std::size_t n, std::size_t channels, std::size_t height, std::size_t width,
                     std::uint64_t seed) {
  if (n == 0) throw ConfigError("synth_normal needs at least one sample");
  Tensor images({n, channels, height, width});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : images.values()) v = static_cast<float>(normal(rng));
  return Dataset{std::move(images), std::nullopt};
}

std::vector<Dataset> split(const Dataset& data, const std::vector<double>& fractions, std::uint64_t seed) {
  if (fractions.empty()) throw ConfigError("split needs at least one fraction");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  const std::size_t n = data.size();
  const auto perm = seeded_permutation(n, seed);
  std::vector<Dataset> parts;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const bool last = i + 1 == fractions.size();
    const std::size_t count =
        last ? n - begin : static_cast<std::size_t>(std::floor(fractions[i] * static_cast<double>(n) + 1e-9));
    if (count == 0) throw ConfigError("split " + std::to_string(i) + " would be empty");
    parts.push_back(data.subset(std::span<const std::size_t>(perm).subspan(begin, count)));
    begin += count;
  }
  return parts;
}

}  // namespace cprune
