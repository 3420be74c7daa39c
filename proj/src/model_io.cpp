// CPRN model files:
//   "CPRN" | u32 version | u64 manifest length | JSON manifest | payload
// The payload holds every tensor as little-endian f32 values in row-major
// order; manifest offsets are byte offsets from the start of the payload.

#include "json.hpp"

#include "binary_io.hpp"
#include "cprune/model.hpp"

namespace cprune {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "CPRN";

struct TensorTable {
  json entries = json::array();
  detail::ByteWriter payload;

  std::string add(const std::string& name, const Tensor& t) {
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", payload.str().size()}});
    for (float v : t.values()) payload.f32(v);
    return name;
  }
};

json layer_manifest(const Layer& layer, std::size_t index, TensorTable& table) {
  const std::string prefix = "layers." + std::to_string(index) + ".";
  json j;
  j["kind"] = layer_kind_name(layer);
  if (const auto* c = std::get_if<Conv2d>(&layer)) {
    j["in_channels"] = c->in_channels;
    j["out_channels"] = c->out_channels;
    j["kernel"] = c->geom.kernel;
    j["stride"] = c->geom.stride;
    j["padding"] = c->geom.padding;
    j["weight"] = table.add(prefix + "weight", c->weight);
    j["bias"] = c->bias ? json(table.add(prefix + "bias", *c->bias)) : json(nullptr);
  } else if (const auto* d = std::get_if<Dense>(&layer)) {
    j["in_features"] = d->in_features;
    j["out_features"] = d->out_features;
    j["weight"] = table.add(prefix + "weight", d->weight);
    j["bias"] = d->bias ? json(table.add(prefix + "bias", *d->bias)) : json(nullptr);
  } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
    j["channels"] = bn->channels();
    j["epsilon"] = static_cast<double>(bn->epsilon);
    j["gamma"] = table.add(prefix + "gamma", bn->gamma);
    j["beta"] = table.add(prefix + "beta", bn->beta);
    j["running_mean"] = table.add(prefix + "running_mean", bn->running_mean);
    j["running_var"] = table.add(prefix + "running_var", bn->running_var);
  } else if (const auto* a = std::get_if<Activation>(&layer)) {
    j["function"] = activation_name(a->kind);
  } else if (const auto* p = std::get_if<MaxPool>(&layer)) {
    j["kernel"] = p->kernel;
    j["stride"] = p->stride;
  }
  return j;
}

class TensorLookup {
 public:
  TensorLookup(const json& entries, std::string_view payload) : payload_(payload) {
    if (!entries.is_array()) throw FormatError("model manifest: 'tensors' must be an array");
    for (const auto& e : entries) {
      index_.emplace(e.at("name").get<std::string>(), &e);
    }
  }

  Tensor get(const json& ref, const Shape& expected) const {
    const auto name = ref.get<std::string>();
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("model manifest: unknown tensor '" + name + "'");
    const json& e = *it->second;
    const auto shape = e.at("shape").get<Shape>();
    if (shape != expected) {
      throw FormatError("model manifest: tensor '" + name + "' has shape " + shape_string(shape) +
                        ", expected " + shape_string(expected));
    }
    const auto offset = e.at("offset").get<std::uint64_t>();
    const std::uint64_t bytes = shape_size(shape) * sizeof(float);
    if (offset > payload_.size() || payload_.size() - offset < bytes) {
      throw FormatError("model file: truncated payload for tensor '" + name + "'");
    }
    detail::ByteReader r(payload_.substr(offset, bytes), "tensor " + name);
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = r.f32();
    return Tensor(shape, std::move(data));
  }

 private:
  std::string_view payload_;
  std::map<std::string, const json*> index_;
};

std::optional<Tensor> optional_tensor(const TensorLookup& t, const json& j, const char* key, const Shape& shape) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return t.get(j.at(key), shape);
}

Layer parse_layer(const json& j, const TensorLookup& t) {
  const auto kind = j.at("kind").get<std::string>();
  if (j.contains("inputs") || kind == "add" || kind == "concat" || kind == "residual") {
    throw FormatError("model file: branching layer '" + kind +
                      "' found; only sequential chains are supported (residual graphs are rejected)");
  }
  if (kind == "conv2d") {
    Conv2d c;
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.out_channels = j.at("out_channels").get<std::size_t>();
    c.geom = {j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>(),
              j.at("padding").get<std::size_t>()};
    const std::size_t k = c.geom.kernel;
    c.weight = t.get(j.at("weight"), {c.out_channels, c.in_channels, k, k});
    c.bias = optional_tensor(t, j, "bias", {c.out_channels});
    return c;
  }
  if (kind == "dense") {
    Dense d;
    d.in_features = j.at("in_features").get<std::size_t>();
    d.out_features = j.at("out_features").get<std::size_t>();
    d.weight = t.get(j.at("weight"), {d.out_features, d.in_features});
    d.bias = optional_tensor(t, j, "bias", {d.out_features});
    return d;
  }
  if (kind == "batchnorm") {
    BatchNorm bn;
    const auto c = j.at("channels").get<std::size_t>();
    bn.epsilon = static_cast<float>(j.at("epsilon").get<double>());
    bn.gamma = t.get(j.at("gamma"), {c});
    bn.beta = t.get(j.at("beta"), {c});
    bn.running_mean = t.get(j.at("running_mean"), {c});
    bn.running_var = t.get(j.at("running_var"), {c});
    return bn;
  }
  if (kind == "activation") {
    try {
      return Activation{parse_activation(j.at("function").get<std::string>())};
    } catch (const ModelError& e) {
      throw FormatError(std::string("model manifest: ") + e.what());
    }
  }
  if (kind == "maxpool") return MaxPool{j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>()};
  if (kind == "global_avg_pool") return GlobalAvgPool{};
  if (kind == "flatten") return Flatten{};
  throw FormatError("model manifest: unsupported layer kind '" + kind + "'");
}

}  // namespace

std::string serialize_model(const Model& model) {
  validate(model);
  TensorTable table;
  json layers = json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) layers.push_back(layer_manifest(model.layers[i], i, table));
  json manifest;
  manifest["input_shape"] = model.input_shape;
  manifest["layers"] = std::move(layers);
  manifest["tensors"] = std::move(table.entries);
  const std::string text = manifest.dump();

  detail::ByteWriter w;
  w.raw(kMagic);
  w.uint<std::uint32_t>(kModelFormatVersion);
  w.uint<std::uint64_t>(text.size());
  w.raw(text);
  w.raw(table.payload.str());
  return std::move(w.str());
}

Model deserialize_model(const std::string& bytes) {
  detail::ByteReader r(bytes, "model file");
  if (bytes.size() < 4 || r.raw(4) != kMagic) throw FormatError("model file: bad magic (expected CPRN)");
  const auto version = r.uint<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw FormatError("model file: unsupported version " + std::to_string(version));
  }
  const auto length = r.uint<std::uint64_t>();
  if (length > r.remaining()) throw FormatError("model file: truncated manifest");
  const auto text = r.raw(static_cast<std::size_t>(length));
  const std::string_view payload = std::string_view(bytes).substr(r.position());

  Model model;
  try {
    const json manifest = json::parse(text);
    model.input_shape = manifest.at("input_shape").get<std::array<std::size_t, 3>>();
    const TensorLookup tensors(manifest.at("tensors"), payload);
    for (const auto& lj : manifest.at("layers")) model.layers.push_back(parse_layer(lj, tensors));
  } catch (const json::exception& e) {
    throw FormatError(std::string("model manifest: ") + e.what());
  }
  try {
    validate(model);
  } catch (const ModelError& e) {
    throw FormatError(std::string("model file describes an invalid network: ") + e.what());
  }
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(model));
}

Model load_model(const std::filesystem::path& path) { return deserialize_model(detail::read_file(path)); }

}  // namespace cprune
