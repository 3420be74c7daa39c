#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cprune/errors.hpp"
#include "cprune/linalg.hpp"
#include "cprune/selection.hpp"
#include "cprune/tensor.hpp"

namespace cprune {

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  ConvGeometry geom;
  Tensor weight;  // out_channels x in_channels x k x k
  std::optional<Tensor> bias;  // out_channels

  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct Dense {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor weight;  // out_features x in_features
  std::optional<Tensor> bias;

  friend bool operator==(const Dense&, const Dense&) = default;
};

struct BatchNorm {
  Tensor gamma, beta, running_mean, running_var;
  float epsilon = 1e-5f;

  std::size_t channels() const { return gamma.size(); }
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

enum class ActivationKind { ReLU, Sigmoid, Identity };

struct Activation {
  ActivationKind kind = ActivationKind::ReLU;
  friend bool operator==(const Activation&, const Activation&) = default;
};

struct MaxPool {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct GlobalAvgPool {
  friend bool operator==(const GlobalAvgPool&, const GlobalAvgPool&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

using Layer = std::variant<Conv2d, Dense, BatchNorm, Activation, MaxPool, GlobalAvgPool, Flatten>;

std::string layer_kind_name(const Layer& layer);
std::string activation_name(ActivationKind kind);
ActivationKind parse_activation(const std::string& name);

/// Per-sample feature shape between layers. Flat features (after Flatten or
/// Dense) are C = D with H = W = 1.
struct FeatureShape {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;
  bool flat = false;

  std::size_t spatial() const { return height * width; }
  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

/// Sequential network: layers applied in order to a C x H x W input.
struct Model {
  std::array<std::size_t, 3> input_shape{};
  std::vector<Layer> layers;

  friend bool operator==(const Model&, const Model&) = default;
};

/// Input shape of every layer plus the final output shape (size layers+1).
/// Throws ModelError if the chain is inconsistent.
std::vector<FeatureShape> propagate_shapes(const Model& model);
void validate(const Model& model);

bool is_parameterized(const Layer& layer);

/// Conv2d/Dense layers whose input channels can be pruned, i.e. that have an
/// upstream Conv2d/Dense producer.
std::vector<std::size_t> prunable_layers(const Model& model);
/// Default search set: prunable Conv2d layers (Dense layers are excluded).
std::vector<std::size_t> default_prune_layers(const Model& model);

/// How a layer's flattened input rows group into prunable channels.
struct InputLayout {
  std::size_t channels = 0;
  std::size_t rows_per_channel = 0;
  std::size_t rows() const { return channels * rows_per_channel; }
};

InputLayout input_layout(const Model& model, std::size_t layer);

/// Index of the Conv2d/Dense layer whose output feeds `layer`, if any.
std::optional<std::size_t> find_producer(const Model& model, std::size_t layer);

/// Flattened (C_in*k*k) x C_out view of a Conv2d, or D_in x D_out of a Dense.
Tensor64 flattened_weights(const Model& model, std::size_t layer);
/// Layer bias as an output-length vector (zeros when the layer has none).
std::vector<double> bias_vector(const Model& model, std::size_t layer);
/// Reshapes a flattened weight matrix back into the layer's weight layout.
Tensor unflatten_weights(const Model& model, std::size_t layer, const Tensor64& flat);

struct ForwardResult {
  Tensor output;
  std::map<std::size_t, Tensor> captured;  // layer index -> that layer's input
};

/// Reference inference on an NCHW batch. Images are processed independently
/// so results do not depend on `workers`.
ForwardResult forward(const Model& model, const Tensor& batch,
                      const std::set<std::size_t>& capture = {}, std::size_t workers = 1);

/// Input of `layer` (layers [0, layer) applied) for the given batch.
Tensor forward_to(const Model& model, const Tensor& batch, std::size_t layer,
                  std::size_t workers = 1);

/// Removes the input channels of `layer` not in `retained`, together with the
/// producer's matching output filters and the slices of any BatchNorm in
/// between.
Model prune_layer(const Model& model, std::size_t layer, const Selection& retained);

/// Replaces the weights of `layer` and sets its bias, creating the bias if
/// the layer had none. `w_hat` uses the layer's own weight layout.
Model apply_compensation(const Model& model, std::size_t layer, const Tensor& w_hat,
                         const Tensor& b_hat);

struct FlopsReport {
  std::vector<std::pair<std::size_t, std::uint64_t>> per_layer;
  std::uint64_t total = 0;
};

/// Sigmoid is costed at 4 operations per element; ReLU and Identity at 1.
FlopsReport flops(const Model& model);

inline constexpr std::uint32_t kModelFormatVersion = 1;

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
std::string serialize_model(const Model& model);
Model deserialize_model(const std::string& bytes);

}  // namespace cprune
