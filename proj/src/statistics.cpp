#include "cprune/statistics.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"

namespace cprune {

namespace {

constexpr double kDeadWeightSum = 1e-12;
constexpr std::string_view kStatsMagic = "CPST";

std::vector<double> to_doubles(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

ActivationContext ActivationContext::for_layer(const Model& model, std::size_t layer) {
  ActivationContext ctx;
  std::size_t next = layer + 1;
  if (next < model.layers.size()) {
    if (const auto* bn = std::get_if<BatchNorm>(&model.layers[next])) {
      ctx.bn = Norm{to_doubles(bn->gamma), to_doubles(bn->beta), to_doubles(bn->running_mean),
                    to_doubles(bn->running_var), static_cast<double>(bn->epsilon)};
      ++next;
    }
  }
  if (next < model.layers.size()) {
    if (const auto* act = std::get_if<Activation>(&model.layers[next])) ctx.act = act->kind;
  }
  return ctx;
}

std::vector<double> activation_derivative(const ActivationContext& ctx, std::span<const double> y) {
  std::vector<double> d(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    double scale = 1.0;
    double z = y[k];
    if (ctx.bn) {
      scale = ctx.bn->gamma[k] / std::sqrt(ctx.bn->var[k] + ctx.bn->epsilon);
      z = scale * (y[k] - ctx.bn->mean[k]) + ctx.bn->beta[k];
    }
    switch (ctx.act) {
      case ActivationKind::ReLU:
        d[k] = z > 0.0 ? scale : 0.0;
        break;
      case ActivationKind::Sigmoid: {
        const double s = 1.0 / (1.0 + std::exp(-z));
        d[k] = scale * s * (1.0 - s);
        break;
      }
      case ActivationKind::Identity:
        d[k] = scale;
        break;
    }
  }
  return d;
}

double activation_weight(const ActivationContext& ctx, std::span<const double> y) {
  if (y.empty()) return 0.0;
  const auto d = activation_derivative(ctx, y);
  double s = 0.0;
  for (double v : d) s += v * v;
  return s / static_cast<double>(d.size());
}

double LayerStatistics::channel_variance(std::size_t channel) const {
  double v = 0.0;
  for (std::size_t r = 0; r < rows_per_channel; ++r) {
    const std::size_t i = channel * rows_per_channel + r;
    v = std::max(v, sigma(i, i));
  }
  return v;
}

StatisticsAccumulator::StatisticsAccumulator(std::size_t dim, std::size_t rows_per_channel)
    : dim_(dim), rows_per_channel_(rows_per_channel), sum_x_(dim, 0.0), sum_xx_(dim * (dim + 1) / 2, 0.0) {
  if (dim == 0 || rows_per_channel == 0 || dim % rows_per_channel != 0) {
    throw ShapeError("statistics dim must be a positive multiple of rows_per_channel");
  }
}

void StatisticsAccumulator::add(std::span<const double> x, double weight) {
  if (x.size() != dim_) throw ShapeError("statistics sample has wrong dimension");
  sample_count_ += 1.0;
  if (weight == 0.0) return;
  weight_sum_ += weight;
  double* outer = sum_xx_.data();
  for (std::size_t i = 0; i < dim_; ++i) {
    const double wx = weight * x[i];
    sum_x_[i] += wx;
    for (std::size_t j = i; j < dim_; ++j) *outer++ += wx * x[j];
  }
}

void StatisticsAccumulator::merge(const StatisticsAccumulator& other) {
  if (other.dim_ != dim_ || other.rows_per_channel_ != rows_per_channel_) {
    throw ShapeError("cannot merge statistics of different dimension or channel layout");
  }
  for (std::size_t i = 0; i < sum_x_.size(); ++i) sum_x_[i] += other.sum_x_[i];
  for (std::size_t i = 0; i < sum_xx_.size(); ++i) sum_xx_[i] += other.sum_xx_[i];
  weight_sum_ += other.weight_sum_;
  sample_count_ += other.sample_count_;
}

LayerStatistics StatisticsAccumulator::finalize() const {
  if (!(weight_sum_ >= kDeadWeightSum)) {
    throw DeadActivationError("weight sum " + std::to_string(weight_sum_) +
                              " below 1e-12: every sampled activation is dead");
  }
  LayerStatistics s;
  s.dim = dim_;
  s.rows_per_channel = rows_per_channel_;
  s.weight_sum = weight_sum_;
  s.sample_count = sample_count_;
  s.mu.resize(dim_);
  for (std::size_t i = 0; i < dim_; ++i) s.mu[i] = sum_x_[i] / weight_sum_;
  s.sigma = Tensor64::matrix(dim_, dim_);
  const double* outer = sum_xx_.data();
  for (std::size_t i = 0; i < dim_; ++i) {
    for (std::size_t j = i; j < dim_; ++j) {
      const double v = *outer++ / weight_sum_ - s.mu[i] * s.mu[j];
      s.sigma(i, j) = v;
      s.sigma(j, i) = v;
    }
    // Round-off can push a zero variance slightly negative.
    if (s.sigma(i, i) < 0.0) s.sigma(i, i) = 0.0;
  }
  return s;
}

StatisticsAccumulator merge_statistics(const StatisticsAccumulator& a, const StatisticsAccumulator& b) {
  StatisticsAccumulator out = a;
  out.merge(b);
  return out;
}

std::vector<std::size_t> sample_positions(std::size_t available, std::size_t wanted, std::uint64_t seed) {
  std::vector<std::size_t> pos(available);
  for (std::size_t i = 0; i < available; ++i) pos[i] = i;
  if (wanted >= available) return pos;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `wanted` slots become a uniform sample
  // without replacement.
  for (std::size_t i = 0; i < wanted; ++i) std::swap(pos[i], pos[i + uniform_index(rng, available - i)]);
  pos.resize(wanted);
  return pos;
}

StatisticsAccumulator accumulate_statistics(const Model& model, const Dataset& data, std::size_t layer,
                                            const StatisticsOptions& opts) {
  if (layer >= model.layers.size() || !is_parameterized(model.layers[layer])) {
    throw ModelError("statistics: layer " + std::to_string(layer) + " is not a conv2d or dense layer");
  }
  if (data.size() == 0) throw ConfigError("statistics: estimation dataset is empty");
  if (opts.patches_per_image == 0) throw ConfigError("statistics: patches per image must be >= 1");

  const InputLayout layout = input_layout(model, layer);
  const Tensor64 w = flattened_weights(model, layer);
  const std::vector<double> b = bias_vector(model, layer);
  const ActivationContext ctx = ActivationContext::for_layer(model, layer);
  const auto* conv = std::get_if<Conv2d>(&model.layers[layer]);
  const std::size_t dim = layout.rows();
  const std::size_t outputs = w.cols();

  const std::size_t n = data.size();
  const std::size_t chunks = (n + kStatisticsChunk - 1) / kStatisticsChunk;
  const std::size_t workers = std::max<std::size_t>(1, opts.workers);

  auto process_chunk = [&](std::size_t chunk) {
    StatisticsAccumulator acc(dim, layout.rows_per_channel);
    const std::size_t lo = chunk * kStatisticsChunk;
    const std::size_t hi = std::min(n, lo + kStatisticsChunk);
    std::vector<std::size_t> idx(hi - lo);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = lo + i;
    const Tensor input = forward_to(model, data.subset(idx).images, layer);

    std::vector<double> x(dim), y(outputs);
    auto add_sample = [&] {
      double weight = 1.0;
      if (opts.weighted) {
        for (std::size_t o = 0; o < outputs; ++o) y[o] = b[o];
        for (std::size_t r = 0; r < dim; ++r) {
          const double xr = x[r];
          if (xr == 0.0) continue;
          const double* wr = w.data() + r * outputs;
          for (std::size_t o = 0; o < outputs; ++o) y[o] += xr * wr[o];
        }
        weight = activation_weight(ctx, y);
      }
      acc.add(x, weight);
    };

    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::uint64_t image_seed = derive_seed(opts.seed, lo + i);
      if (conv) {
        const std::size_t out_h = conv->geom.out_extent(input.dim(2));
        const std::size_t out_w = conv->geom.out_extent(input.dim(3));
        for (auto p : sample_positions(out_h * out_w, opts.patches_per_image, image_seed)) {
          extract_patch<double>(input, i, p / out_w, p % out_w, conv->geom, x);
          add_sample();
        }
      } else {
        const float* src = input.data() + i * dim;
        for (std::size_t r = 0; r < dim; ++r) x[r] = src[r];
        add_sample();
      }
    }
    return acc;
  };

  StatisticsAccumulator total(dim, layout.rows_per_channel);
  for (std::size_t wave = 0; wave < chunks; wave += workers) {
    const std::size_t count = std::min(workers, chunks - wave);
    std::vector<std::optional<StatisticsAccumulator>> parts(count);
    parallel_for(count, workers, [&](std::size_t j) { parts[j] = process_chunk(wave + j); });
    for (auto& p : parts) total.merge(*p);
  }
  return total;
}

LayerStatistics estimate_statistics(const Model& model, const Dataset& data, std::size_t layer,
                                    const StatisticsOptions& opts) {
  return accumulate_statistics(model, data, layer, opts).finalize();
}

std::string serialize_statistics(const LayerStatistics& stats) {
  detail::ByteWriter w;
  w.raw(kStatsMagic);
  w.uint<std::uint32_t>(kStatisticsFormatVersion);
  w.uint<std::uint64_t>(stats.dim);
  w.uint<std::uint64_t>(stats.rows_per_channel);
  for (double v : stats.mu) w.f64(v);
  for (double v : stats.sigma.values()) w.f64(v);
  w.f64(stats.weight_sum);
  w.f64(stats.sample_count);
  return std::move(w.str());
}

LayerStatistics deserialize_statistics(const std::string& bytes) {
  detail::ByteReader r(bytes, "statistics file");
  if (bytes.size() < 4 || r.raw(4) != kStatsMagic) throw FormatError("statistics file: bad magic (expected CPST)");
  const auto version = r.uint<std::uint32_t>();
  if (version != kStatisticsFormatVersion) {
    throw FormatError("statistics file: unsupported version " + std::to_string(version));
  }
  LayerStatistics s;
  s.dim = r.uint<std::uint64_t>();
  s.rows_per_channel = r.uint<std::uint64_t>();
  if (s.dim == 0 || s.rows_per_channel == 0 || s.dim % s.rows_per_channel != 0) {
    throw FormatError("statistics file: inconsistent dim / rows_per_channel");
  }
  if (r.remaining() != (s.dim + s.dim * s.dim + 2) * 8) throw FormatError("statistics file: truncated payload");
  s.mu.resize(s.dim);
  for (auto& v : s.mu) v = r.f64();
  s.sigma = Tensor64::matrix(s.dim, s.dim);
  for (auto& v : s.sigma.values()) v = r.f64();
  s.weight_sum = r.f64();
  s.sample_count = r.f64();
  return s;
}

void save_statistics(const LayerStatistics& stats, const std::filesystem::path& path) {
  detail::write_file(path, serialize_statistics(stats));
}

LayerStatistics load_statistics(const std::filesystem::path& path) {
  return deserialize_statistics(detail::read_file(path));
}

}  // namespace cprune
