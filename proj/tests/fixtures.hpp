#pragma once

// Seeded generators and small model builders shared by the tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cprune/dataset.hpp"
#include "cprune/model.hpp"
#include "cprune/search.hpp"
#include "cprune/statistics.hpp"

namespace fixture {

using namespace cprune;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double normal() { return normal_(eng_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(eng_); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(unit_(eng_) * static_cast<double>(n)) % n; }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(scale * rng.normal());
  return t;
}

inline Tensor64 random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor64 m = Tensor64::matrix(rows, cols);
  for (auto& v : m.values()) v = scale * rng.normal();
  return m;
}

/// G G^T / n + ridge * I, well conditioned for moderate ridge.
inline Tensor64 random_spd(std::size_t n, Rng& rng, double ridge = 0.1) {
  const Tensor64 g = random_matrix(n, n, rng);
  Tensor64 s = Tensor64::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double v = 0.0;
      for (std::size_t k = 0; k < n; ++k) v += g(i, k) * g(j, k);
      s(i, j) = v / static_cast<double>(n) + (i == j ? ridge : 0.0);
    }
  return s;
}

/// Statistics with a prescribed covariance and zero mean.
inline LayerStatistics stats_from_sigma(const Tensor64& sigma, std::size_t rows_per_channel) {
  LayerStatistics s;
  s.dim = sigma.rows();
  s.rows_per_channel = rows_per_channel;
  s.mu.assign(s.dim, 0.0);
  s.sigma = sigma;
  s.weight_sum = 1.0;
  s.sample_count = 1.0;
  return s;
}

/// Weighted samples of correlated channels, a random layer on top, and the
/// statistics accumulated from them.
struct Instance {
  Tensor64 x;  // samples x dim
  std::vector<double> weights;
  Tensor64 w;  // dim x outputs
  std::vector<double> b;
  LayerStatistics stats;
};

inline Instance random_instance(std::size_t channels, std::size_t rows_per_channel, std::size_t outputs,
                                std::size_t samples, Rng& rng) {
  const std::size_t dim = channels * rows_per_channel;
  Instance inst;
  const Tensor64 mix = random_matrix(dim, dim, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
  std::vector<double> offset(dim);
  for (auto& v : offset) v = rng.normal();
  inst.x = Tensor64::matrix(samples, dim);
  std::vector<double> z(dim);
  for (std::size_t s = 0; s < samples; ++s) {
    for (auto& v : z) v = rng.normal();
    for (std::size_t i = 0; i < dim; ++i) {
      double v = offset[i] + 0.3 * z[i];
      for (std::size_t k = 0; k < dim; ++k) v += mix(i, k) * z[k];
      inst.x(s, i) = v;
    }
  }
  inst.weights.resize(samples);
  for (auto& v : inst.weights) v = rng.uniform(0.1, 2.0);
  inst.w = random_matrix(dim, outputs, rng);
  inst.b.resize(outputs);
  for (auto& v : inst.b) v = rng.normal();
  StatisticsAccumulator acc(dim, rows_per_channel);
  for (std::size_t s = 0; s < samples; ++s) {
    acc.add(std::span<const double>(inst.x.data() + s * dim, dim), inst.weights[s]);
  }
  inst.stats = acc.finalize();
  return inst;
}

inline Conv2d make_conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                        Rng& rng, bool bias = true) {
  Conv2d c;
  c.in_channels = cin;
  c.out_channels = cout;
  c.geom = ConvGeometry{k, stride, pad};
  c.weight = random_tensor({cout, cin, k, k}, rng, 1.0 / std::sqrt(static_cast<double>(cin * k * k)));
  if (bias) c.bias = random_tensor({cout}, rng, 0.1);
  return c;
}

inline Dense make_dense(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
  Dense d;
  d.in_features = in;
  d.out_features = out;
  d.weight = random_tensor({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  if (bias) d.bias = random_tensor({out}, rng, 0.1);
  return d;
}

inline BatchNorm make_bn(std::size_t c, Rng& rng) {
  BatchNorm bn;
  bn.gamma = Tensor({c});
  bn.beta = Tensor({c});
  bn.running_mean = Tensor({c});
  bn.running_var = Tensor({c});
  for (std::size_t i = 0; i < c; ++i) {
    bn.gamma[i] = static_cast<float>(rng.uniform(0.5, 1.5));
    bn.beta[i] = static_cast<float>(0.1 * rng.normal());
    bn.running_mean[i] = static_cast<float>(0.1 * rng.normal());
    bn.running_var[i] = static_cast<float>(rng.uniform(0.5, 1.5));
  }
  return bn;
}

/// Input 3x6x6: conv-BN-ReLU, conv-BN-ReLU, maxpool, 1x1 conv + sigmoid,
/// global average pool, flatten, dense to 3 classes.
inline Model small_cnn(Rng& rng) {
  Model m;
  m.input_shape = {3, 6, 6};
  m.layers.push_back(make_conv(3, 4, 3, 1, 1, rng));
  m.layers.push_back(make_bn(4, rng));
  m.layers.push_back(Activation{ActivationKind::ReLU});
  m.layers.push_back(make_conv(4, 6, 3, 1, 1, rng, false));
  m.layers.push_back(make_bn(6, rng));
  m.layers.push_back(Activation{ActivationKind::ReLU});
  m.layers.push_back(MaxPool{2, 2});
  m.layers.push_back(make_conv(6, 5, 1, 1, 0, rng));
  m.layers.push_back(Activation{ActivationKind::Sigmoid});
  m.layers.push_back(GlobalAvgPool{});
  m.layers.push_back(Flatten{});
  m.layers.push_back(make_dense(5, 3, rng));
  return m;
}

/// Conv stack over 3x4x4 inputs ending in flatten + dense, so the dense
/// layer has several rows per input channel.
inline Model flatten_cnn(Rng& rng) {
  Model m;
  m.input_shape = {3, 4, 4};
  m.layers.push_back(make_conv(3, 4, 3, 1, 1, rng));
  m.layers.push_back(Activation{ActivationKind::ReLU});
  m.layers.push_back(make_conv(4, 3, 3, 2, 1, rng));
  m.layers.push_back(Activation{ActivationKind::Identity});
  m.layers.push_back(Flatten{});
  m.layers.push_back(make_dense(12, 4, rng));
  return m;
}

/// Copies output filter `from` (weights, bias and any directly following
/// BatchNorm entry) onto filter `to` of the conv at `layer`.
inline void copy_filter(Model& m, std::size_t layer, std::size_t from, std::size_t to) {
  auto& conv = std::get<Conv2d>(m.layers[layer]);
  const std::size_t per = conv.weight.size() / conv.out_channels;
  for (std::size_t i = 0; i < per; ++i) conv.weight[to * per + i] = conv.weight[from * per + i];
  if (conv.bias) (*conv.bias)[to] = (*conv.bias)[from];
  if (layer + 1 < m.layers.size()) {
    if (auto* bn = std::get_if<BatchNorm>(&m.layers[layer + 1])) {
      bn->gamma[to] = bn->gamma[from];
      bn->beta[to] = bn->beta[from];
      bn->running_mean[to] = bn->running_mean[from];
      bn->running_var[to] = bn->running_var[from];
    }
  }
}

/// Layer indices of the redundancy fixture below.
inline constexpr std::size_t kFixtureConv1 = 3;
inline constexpr std::size_t kFixtureConv2 = 7;

/// Three conv-BN-ReLU blocks (3 -> 8 -> 16 -> 16 channels over 8x8 inputs)
/// where the second half of every conv's filters duplicates the first half.
/// Filter 3 of the first conv is filter 2 plus `near_copy` times noise, so
/// keeping three of its four distinct channels costs a little accuracy.
inline constexpr double kFixtureNearCopy = 0.002;

inline Model redundant_cnn(double near_copy = kFixtureNearCopy, std::uint64_t seed = 11) {
  Rng rng(seed);
  Model m;
  m.input_shape = {3, 8, 8};
  m.layers.push_back(make_conv(3, 8, 3, 1, 1, rng));
  m.layers.push_back(make_bn(8, rng));
  m.layers.push_back(Activation{ActivationKind::ReLU});
  m.layers.push_back(make_conv(8, 16, 3, 1, 1, rng));
  m.layers.push_back(make_bn(16, rng));
  m.layers.push_back(Activation{ActivationKind::ReLU});
  m.layers.push_back(MaxPool{2, 2});
  m.layers.push_back(make_conv(16, 16, 3, 1, 1, rng));
  m.layers.push_back(make_bn(16, rng));
  m.layers.push_back(Activation{ActivationKind::ReLU});
  m.layers.push_back(GlobalAvgPool{});
  m.layers.push_back(Flatten{});
  m.layers.push_back(make_dense(16, 10, rng));

  auto& conv0 = std::get<Conv2d>(m.layers[0]);
  const std::size_t per = conv0.weight.size() / conv0.out_channels;
  copy_filter(m, 0, 2, 3);
  for (std::size_t i = 0; i < per; ++i) conv0.weight[3 * per + i] += static_cast<float>(near_copy * rng.normal());
  for (std::size_t f = 0; f < 4; ++f) copy_filter(m, 0, f, f + 4);
  for (std::size_t f = 0; f < 8; ++f) copy_filter(m, kFixtureConv1, f, f + 8);
  for (std::size_t f = 0; f < 8; ++f) copy_filter(m, kFixtureConv2, f, f + 8);

  // Centre the classifier on the mean pooled feature so predictions spread
  // over the classes instead of following the bias.
  const std::size_t head = m.layers.size() - 1;
  const Tensor feats = forward_to(m, synth_normal(256, 3, 8, 8, seed + 1).images, head);
  auto& dense = std::get<Dense>(m.layers[head]);
  std::vector<double> mean(dense.in_features, 0.0);
  for (std::size_t n = 0; n < feats.dim(0); ++n)
    for (std::size_t i = 0; i < dense.in_features; ++i) mean[i] += feats[n * dense.in_features + i];
  for (auto& v : mean) v /= static_cast<double>(feats.dim(0));
  for (std::size_t o = 0; o < dense.out_features; ++o) {
    double b = 0.0;
    for (std::size_t i = 0; i < dense.in_features; ++i) b -= dense.weight[o * dense.in_features + i] * mean[i];
    (*dense.bias)[o] = static_cast<float>(b);
  }
  return m;
}

/// Inputs labeled with the model's own predictions.
inline Dataset self_labeled(const Model& m, Dataset data) {
  data.labels = predict(m, data.images);
  return data;
}

}  // namespace fixture
