#include "cprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cprune {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string at_layer(std::size_t i) { return "layer " + std::to_string(i) + ": "; }

void expect_shape(const Tensor& t, const Shape& shape, std::size_t layer, const char* name) {
  if (t.shape() != shape) {
    throw ModelError(at_layer(layer) + name + " has shape " + shape_string(t.shape()) +
                     ", expected " + shape_string(shape));
  }
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

Tensor conv_forward(const Conv2d& conv, const Tensor& x, std::size_t workers) {
  const std::size_t batch = x.dim(0);
  const std::size_t out_h = conv.geom.out_extent(x.dim(2));
  const std::size_t out_w = conv.geom.out_extent(x.dim(3));
  const std::size_t rows = conv.in_channels * conv.geom.kernel * conv.geom.kernel;
  const std::size_t positions = out_h * out_w;
  const Tensor wmat = conv.weight.reshaped({conv.out_channels, rows});
  Tensor out({batch, conv.out_channels, out_h, out_w});
  parallel_for(batch, workers, [&](std::size_t n) {
    Tensor cols = Tensor::matrix(rows, positions);
    std::vector<float> patch(rows);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        extract_patch<float>(x, n, oy, ox, conv.geom, patch);
        const std::size_t j = oy * out_w + ox;
        for (std::size_t r = 0; r < rows; ++r) cols(r, j) = patch[r];
      }
    }
    const Tensor y = matmul(wmat, cols);
    float* dst = out.data() + n * conv.out_channels * positions;
    for (std::size_t o = 0; o < conv.out_channels; ++o) {
      const float b = conv.bias ? (*conv.bias)[o] : 0.0f;
      for (std::size_t p = 0; p < positions; ++p) dst[o * positions + p] = y(o, p) + b;
    }
  });
  return out;
}

Tensor dense_forward(const Dense& dense, const Tensor& x, std::size_t workers) {
  const std::size_t batch = x.dim(0);
  Tensor out = Tensor::matrix(batch, dense.out_features);
  parallel_for(batch, workers, [&](std::size_t n) {
    const float* xi = x.data() + n * dense.in_features;
    for (std::size_t o = 0; o < dense.out_features; ++o) {
      const float* w = dense.weight.data() + o * dense.in_features;
      float s = 0.0f;
      for (std::size_t i = 0; i < dense.in_features; ++i) s += w[i] * xi[i];
      out(n, o) = s + (dense.bias ? (*dense.bias)[o] : 0.0f);
    }
  });
  return out;
}

Tensor batchnorm_forward(const BatchNorm& bn, const Tensor& x) {
  Tensor out = x;
  const std::size_t batch = x.dim(0), channels = bn.channels();
  const std::size_t spatial = x.size() / (batch * channels);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const float denom = std::sqrt(bn.running_var[c] + bn.epsilon);
      float* p = out.data() + (n * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        p[s] = (p[s] - bn.running_mean[c]) / denom * bn.gamma[c] + bn.beta[c];
      }
    }
  }
  return out;
}

Tensor activation_forward(const Activation& act, const Tensor& x) {
  Tensor out = x;
  switch (act.kind) {
    case ActivationKind::ReLU:
      for (auto& v : out.values()) v = std::max(v, 0.0f);
      break;
    case ActivationKind::Sigmoid:
      for (auto& v : out.values()) v = sigmoid(v);
      break;
    case ActivationKind::Identity:
      break;
  }
  return out;
}

Tensor maxpool_forward(const MaxPool& pool, const Tensor& x) {
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t out_h = (x.dim(2) - pool.kernel) / pool.stride + 1;
  const std::size_t out_w = (x.dim(3) - pool.kernel) / pool.stride + 1;
  Tensor out({batch, channels, out_h, out_w});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          float m = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < pool.kernel; ++ky)
            for (std::size_t kx = 0; kx < pool.kernel; ++kx)
              m = std::max(m, x.at4(n, c, oy * pool.stride + ky, ox * pool.stride + kx));
          out.at4(n, c, oy, ox) = m;
        }
  return out;
}

Tensor gap_forward(const Tensor& x) {
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.dim(2) * x.dim(3);
  Tensor out({batch, channels, 1, 1});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const float* p = x.data() + (n * channels + c) * spatial;
      double s = 0.0;
      for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      out[n * channels + c] = static_cast<float>(s / static_cast<double>(spatial));
    }
  return out;
}

Tensor slice_vector(const Tensor& v, const std::vector<std::size_t>& keep) {
  std::vector<float> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(v[i]);
  return Tensor({keep.size()}, std::move(out));
}

}  // namespace

std::string layer_kind_name(const Layer& layer) {
  return std::visit(overloaded{[](const Conv2d&) { return std::string("conv2d"); },
                               [](const Dense&) { return std::string("dense"); },
                               [](const BatchNorm&) { return std::string("batchnorm"); },
                               [](const Activation&) { return std::string("activation"); },
                               [](const MaxPool&) { return std::string("maxpool"); },
                               [](const GlobalAvgPool&) { return std::string("global_avg_pool"); },
                               [](const Flatten&) { return std::string("flatten"); }},
                    layer);
}

std::string activation_name(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::Sigmoid: return "sigmoid";
    case ActivationKind::Identity: return "identity";
  }
  return "identity";
}

ActivationKind parse_activation(const std::string& name) {
  if (name == "relu") return ActivationKind::ReLU;
  if (name == "sigmoid") return ActivationKind::Sigmoid;
  if (name == "identity") return ActivationKind::Identity;
  throw ModelError("unknown activation '" + name + "'");
}

std::vector<FeatureShape> propagate_shapes(const Model& model) {
  const auto& in = model.input_shape;
  if (in[0] == 0 || in[1] == 0 || in[2] == 0) throw ModelError("model input shape must be positive");
  std::vector<FeatureShape> shapes;
  shapes.reserve(model.layers.size() + 1);
  shapes.push_back({in[0], in[1], in[2], false});

  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const FeatureShape s = shapes.back();
    FeatureShape next = std::visit(
        overloaded{
            [&](const Conv2d& c) {
              if (s.flat) throw ModelError(at_layer(i) + "conv2d cannot follow flat features");
              if (s.channels != c.in_channels) {
                throw ModelError(at_layer(i) + "conv2d expects " + std::to_string(c.in_channels) +
                                 " input channels, upstream produces " + std::to_string(s.channels));
              }
              const std::size_t k = c.geom.kernel;
              expect_shape(c.weight, {c.out_channels, c.in_channels, k, k}, i, "weight");
              if (c.bias) expect_shape(*c.bias, {c.out_channels}, i, "bias");
              try {
                return FeatureShape{c.out_channels, c.geom.out_extent(s.height),
                                    c.geom.out_extent(s.width), false};
              } catch (const ShapeError& e) {
                throw ModelError(at_layer(i) + e.what());
              }
            },
            [&](const Dense& d) {
              if (!s.flat) throw ModelError(at_layer(i) + "dense requires flat input (insert flatten)");
              if (s.channels != d.in_features) {
                throw ModelError(at_layer(i) + "dense expects " + std::to_string(d.in_features) +
                                 " features, upstream produces " + std::to_string(s.channels));
              }
              expect_shape(d.weight, {d.out_features, d.in_features}, i, "weight");
              if (d.bias) expect_shape(*d.bias, {d.out_features}, i, "bias");
              return FeatureShape{d.out_features, 1, 1, true};
            },
            [&](const BatchNorm& bn) {
              if (bn.channels() != s.channels) {
                throw ModelError(at_layer(i) + "batchnorm has " + std::to_string(bn.channels()) +
                                 " channels, upstream produces " + std::to_string(s.channels));
              }
              expect_shape(bn.beta, {s.channels}, i, "beta");
              expect_shape(bn.running_mean, {s.channels}, i, "running_mean");
              expect_shape(bn.running_var, {s.channels}, i, "running_var");
              for (float v : bn.running_var.values())
                if (!(v >= 0.0f)) throw ModelError(at_layer(i) + "batchnorm running_var must be >= 0");
              if (!(bn.epsilon > 0.0f)) throw ModelError(at_layer(i) + "batchnorm epsilon must be > 0");
              return s;
            },
            [&](const Activation&) { return s; },
            [&](const MaxPool& p) {
              if (s.flat) throw ModelError(at_layer(i) + "maxpool cannot follow flat features");
              if (p.kernel == 0 || p.stride == 0) throw ModelError(at_layer(i) + "maxpool kernel/stride must be >= 1");
              if (s.height < p.kernel || s.width < p.kernel) {
                throw ModelError(at_layer(i) + "maxpool kernel larger than input");
              }
              return FeatureShape{s.channels, (s.height - p.kernel) / p.stride + 1,
                                  (s.width - p.kernel) / p.stride + 1, false};
            },
            [&](const GlobalAvgPool&) {
              if (s.flat) throw ModelError(at_layer(i) + "global_avg_pool cannot follow flat features");
              return FeatureShape{s.channels, 1, 1, false};
            },
            [&](const Flatten&) { return FeatureShape{s.size(), 1, 1, true}; }},
        model.layers[i]);
    shapes.push_back(next);
  }
  return shapes;
}

void validate(const Model& model) { (void)propagate_shapes(model); }

bool is_parameterized(const Layer& layer) {
  return std::holds_alternative<Conv2d>(layer) || std::holds_alternative<Dense>(layer);
}

std::optional<std::size_t> find_producer(const Model& model, std::size_t layer) {
  if (layer >= model.layers.size()) throw ModelError("layer index out of range");
  for (std::size_t j = layer; j-- > 0;) {
    if (is_parameterized(model.layers[j])) return j;
  }
  return std::nullopt;
}

std::vector<std::size_t> prunable_layers(const Model& model) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (is_parameterized(model.layers[i]) && find_producer(model, i)) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> default_prune_layers(const Model& model) {
  std::vector<std::size_t> out;
  for (auto i : prunable_layers(model))
    if (std::holds_alternative<Conv2d>(model.layers[i])) out.push_back(i);
  return out;
}

InputLayout input_layout(const Model& model, std::size_t layer) {
  if (layer >= model.layers.size()) throw ModelError("layer index out of range");
  const auto& l = model.layers[layer];
  if (const auto* conv = std::get_if<Conv2d>(&l)) {
    return {conv->in_channels, conv->geom.kernel * conv->geom.kernel};
  }
  const auto* dense = std::get_if<Dense>(&l);
  if (!dense) throw ModelError(at_layer(layer) + "only conv2d and dense layers have a flattened input");
  // Flattened C x H x W features keep channel c in the contiguous block
  // [c*H*W, (c+1)*H*W), the same convention as im2col rows.
  const auto shapes = propagate_shapes(model);
  for (std::size_t j = layer; j-- > 0;) {
    const auto& prev = model.layers[j];
    if (std::holds_alternative<Flatten>(prev)) {
      const FeatureShape& s = shapes[j];
      if (s.flat) return {dense->in_features, 1};
      return {s.channels, s.spatial()};
    }
    if (std::holds_alternative<Dense>(prev)) return {dense->in_features, 1};
  }
  return {dense->in_features, 1};
}

Tensor64 flattened_weights(const Model& model, std::size_t layer) {
  const auto& l = model.layers.at(layer);
  if (const auto* conv = std::get_if<Conv2d>(&l)) {
    const std::size_t rows = conv->in_channels * conv->geom.kernel * conv->geom.kernel;
    Tensor64 w = Tensor64::matrix(rows, conv->out_channels);
    for (std::size_t o = 0; o < conv->out_channels; ++o)
      for (std::size_t r = 0; r < rows; ++r) w(r, o) = conv->weight[o * rows + r];
    return w;
  }
  if (const auto* dense = std::get_if<Dense>(&l)) {
    Tensor64 w = Tensor64::matrix(dense->in_features, dense->out_features);
    for (std::size_t o = 0; o < dense->out_features; ++o)
      for (std::size_t i = 0; i < dense->in_features; ++i) w(i, o) = dense->weight(o, i);
    return w;
  }
  throw ModelError(at_layer(layer) + "not a conv2d or dense layer");
}

std::vector<double> bias_vector(const Model& model, std::size_t layer) {
  const auto& l = model.layers.at(layer);
  const std::optional<Tensor>* bias = nullptr;
  std::size_t n = 0;
  if (const auto* conv = std::get_if<Conv2d>(&l)) {
    bias = &conv->bias;
    n = conv->out_channels;
  } else if (const auto* dense = std::get_if<Dense>(&l)) {
    bias = &dense->bias;
    n = dense->out_features;
  } else {
    throw ModelError(at_layer(layer) + "not a conv2d or dense layer");
  }
  std::vector<double> b(n, 0.0);
  if (*bias)
    for (std::size_t i = 0; i < n; ++i) b[i] = (**bias)[i];
  return b;
}

Tensor unflatten_weights(const Model& model, std::size_t layer, const Tensor64& flat) {
  const auto& l = model.layers.at(layer);
  if (const auto* conv = std::get_if<Conv2d>(&l)) {
    const std::size_t k = conv->geom.kernel;
    const std::size_t rows = conv->in_channels * k * k;
    if (flat.rank() != 2 || flat.rows() != rows || flat.cols() != conv->out_channels) {
      throw ShapeError(at_layer(layer) + "flattened weights have shape " + shape_string(flat.shape()));
    }
    Tensor w({conv->out_channels, conv->in_channels, k, k});
    for (std::size_t o = 0; o < conv->out_channels; ++o)
      for (std::size_t r = 0; r < rows; ++r) w[o * rows + r] = static_cast<float>(flat(r, o));
    return w;
  }
  if (const auto* dense = std::get_if<Dense>(&l)) {
    if (flat.rank() != 2 || flat.rows() != dense->in_features || flat.cols() != dense->out_features) {
      throw ShapeError(at_layer(layer) + "flattened weights have shape " + shape_string(flat.shape()));
    }
    Tensor w = Tensor::matrix(dense->out_features, dense->in_features);
    for (std::size_t o = 0; o < dense->out_features; ++o)
      for (std::size_t i = 0; i < dense->in_features; ++i) w(o, i) = static_cast<float>(flat(i, o));
    return w;
  }
  throw ModelError(at_layer(layer) + "not a conv2d or dense layer");
}

ForwardResult forward(const Model& model, const Tensor& batch, const std::set<std::size_t>& capture,
                      std::size_t workers) {
  const auto& in = model.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw ShapeError("batch shape " + shape_string(batch.shape()) + " does not match model input " +
                     shape_string({in[0], in[1], in[2]}));
  }
  validate(model);
  ForwardResult result;
  Tensor x = batch;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (capture.count(i)) result.captured.emplace(i, x);
    x = std::visit(overloaded{[&](const Conv2d& c) { return conv_forward(c, x, workers); },
                              [&](const Dense& d) { return dense_forward(d, x, workers); },
                              [&](const BatchNorm& bn) { return batchnorm_forward(bn, x); },
                              [&](const Activation& a) { return activation_forward(a, x); },
                              [&](const MaxPool& p) { return maxpool_forward(p, x); },
                              [&](const GlobalAvgPool&) { return gap_forward(x); },
                              [&](const Flatten&) {
                                return x.reshaped({x.dim(0), x.size() / x.dim(0)});
                              }},
                   model.layers[i]);
  }
  result.output = std::move(x);
  return result;
}

Tensor forward_to(const Model& model, const Tensor& batch, std::size_t layer, std::size_t workers) {
  if (layer >= model.layers.size()) throw ModelError("layer index out of range");
  Model prefix{model.input_shape, {model.layers.begin(), model.layers.begin() + static_cast<std::ptrdiff_t>(layer)}};
  return forward(prefix, batch, {}, workers).output;
}

Model prune_layer(const Model& model, std::size_t layer, const Selection& retained) {
  validate(model);
  if (layer >= model.layers.size() || !is_parameterized(model.layers[layer])) {
    throw ModelError("prune_layer: layer " + std::to_string(layer) + " is not a conv2d or dense layer");
  }
  const auto producer = find_producer(model, layer);
  if (!producer) {
    throw ModelError("prune_layer: layer " + std::to_string(layer) +
                     " has no upstream producer; the input channels of the first layer are not prunable");
  }
  const InputLayout layout = input_layout(model, layer);
  if (retained.all_channels() != layout.channels || retained.rows_per_channel() != layout.rows_per_channel) {
    throw ModelError("prune_layer: selection covers " + std::to_string(retained.all_channels()) + " channels x " +
                     std::to_string(retained.rows_per_channel()) + " rows, layer has " +
                     std::to_string(layout.channels) + " x " + std::to_string(layout.rows_per_channel));
  }
  const auto& keep = retained.retained();
  Model out = model;

  // Consumer: keep the input slices of retained channels.
  if (auto* conv = std::get_if<Conv2d>(&out.layers[layer])) {
    const std::size_t kk = conv->geom.kernel * conv->geom.kernel;
    Tensor w({conv->out_channels, keep.size(), conv->geom.kernel, conv->geom.kernel});
    for (std::size_t o = 0; o < conv->out_channels; ++o)
      for (std::size_t s = 0; s < keep.size(); ++s)
        for (std::size_t r = 0; r < kk; ++r)
          w[(o * keep.size() + s) * kk + r] = conv->weight[(o * conv->in_channels + keep[s]) * kk + r];
    conv->weight = std::move(w);
    conv->in_channels = keep.size();
  } else {
    auto& dense = std::get<Dense>(out.layers[layer]);
    const auto rows = retained.rows();
    Tensor w = Tensor::matrix(dense.out_features, rows.size());
    for (std::size_t o = 0; o < dense.out_features; ++o)
      for (std::size_t i = 0; i < rows.size(); ++i) w(o, i) = dense.weight(o, rows[i]);
    dense.weight = std::move(w);
    dense.in_features = rows.size();
  }

  // Producer: drop the matching output filters.
  if (auto* conv = std::get_if<Conv2d>(&out.layers[*producer])) {
    const std::size_t per_filter = conv->in_channels * conv->geom.kernel * conv->geom.kernel;
    Tensor w({keep.size(), conv->in_channels, conv->geom.kernel, conv->geom.kernel});
    for (std::size_t s = 0; s < keep.size(); ++s)
      std::copy_n(conv->weight.data() + keep[s] * per_filter, per_filter, w.data() + s * per_filter);
    conv->weight = std::move(w);
    conv->out_channels = keep.size();
    if (conv->bias) conv->bias = slice_vector(*conv->bias, keep);
  } else {
    auto& dense = std::get<Dense>(out.layers[*producer]);
    Tensor w = Tensor::matrix(keep.size(), dense.in_features);
    for (std::size_t s = 0; s < keep.size(); ++s)
      std::copy_n(dense.weight.data() + keep[s] * dense.in_features, dense.in_features,
                  w.data() + s * dense.in_features);
    dense.weight = std::move(w);
    dense.out_features = keep.size();
    if (dense.bias) dense.bias = slice_vector(*dense.bias, keep);
  }

  // Channel-wise layers in between keep their retained slices; pooling,
  // activation and flatten carry channel identity through unchanged.
  for (std::size_t j = *producer + 1; j < layer; ++j) {
    if (auto* bn = std::get_if<BatchNorm>(&out.layers[j])) {
      if (bn->channels() != layout.channels) {
        throw ModelError(at_layer(j) + "batchnorm after flatten cannot be channel-sliced");
      }
      bn->gamma = slice_vector(bn->gamma, keep);
      bn->beta = slice_vector(bn->beta, keep);
      bn->running_mean = slice_vector(bn->running_mean, keep);
      bn->running_var = slice_vector(bn->running_var, keep);
    }
  }
  validate(out);
  return out;
}

Model apply_compensation(const Model& model, std::size_t layer, const Tensor& w_hat, const Tensor& b_hat) {
  if (layer >= model.layers.size()) throw ModelError("layer index out of range");
  Model out = model;
  if (auto* conv = std::get_if<Conv2d>(&out.layers[layer])) {
    if (w_hat.shape() != conv->weight.shape()) {
      throw ShapeError("apply_compensation: w_hat shape " + shape_string(w_hat.shape()) +
                       " differs from layer weight " + shape_string(conv->weight.shape()));
    }
    if (b_hat.shape() != Shape{conv->out_channels}) throw ShapeError("apply_compensation: b_hat length mismatch");
    conv->weight = w_hat;
    conv->bias = b_hat;
  } else if (auto* dense = std::get_if<Dense>(&out.layers[layer])) {
    if (w_hat.shape() != dense->weight.shape()) {
      throw ShapeError("apply_compensation: w_hat shape " + shape_string(w_hat.shape()) +
                       " differs from layer weight " + shape_string(dense->weight.shape()));
    }
    if (b_hat.shape() != Shape{dense->out_features}) throw ShapeError("apply_compensation: b_hat length mismatch");
    dense->weight = w_hat;
    dense->bias = b_hat;
  } else {
    throw ModelError(at_layer(layer) + "not a conv2d or dense layer");
  }
  return out;
}

FlopsReport flops(const Model& model) {
  const auto shapes = propagate_shapes(model);
  FlopsReport report;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const FeatureShape& in = shapes[i];
    const FeatureShape& out = shapes[i + 1];
    const std::uint64_t in_elems = in.size();
    const std::uint64_t count = std::visit(
        overloaded{
            [&](const Conv2d& c) -> std::uint64_t {
              const std::uint64_t k = c.geom.kernel, s = c.geom.stride;
              std::uint64_t f = k * k * in.width * in.height * c.in_channels * c.out_channels / (s * s);
              if (c.bias) f += static_cast<std::uint64_t>(out.size());
              return f;
            },
            [&](const Dense& d) -> std::uint64_t {
              std::uint64_t f = static_cast<std::uint64_t>(d.in_features) * d.out_features;
              if (d.bias) f += d.out_features;
              return f;
            },
            [&](const BatchNorm&) -> std::uint64_t { return 2 * in_elems; },
            [&](const Activation& a) -> std::uint64_t {
              return (a.kind == ActivationKind::Sigmoid ? 4 : 1) * in_elems;
            },
            [&](const MaxPool& p) -> std::uint64_t {
              return static_cast<std::uint64_t>(p.kernel) * p.kernel * out.size();
            },
            [&](const GlobalAvgPool&) -> std::uint64_t { return in_elems; },
            [&](const Flatten&) -> std::uint64_t { return 0; }},
        model.layers[i]);
    report.per_layer.emplace_back(i, count);
    report.total += count;
  }
  return report;
}

}  // namespace cprune
