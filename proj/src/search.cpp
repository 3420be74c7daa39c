#include "cprune/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "cprune/compensation.hpp"
#include "json.hpp"

namespace cprune {

namespace {

constexpr std::size_t kEvalBatch = 256;

std::string number(double v) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

nlohmann::ordered_json json_number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

}  // namespace

std::string visit_order_name(VisitOrder order) {
  switch (order) {
    case VisitOrder::BottomUp: return "bottomup";
    case VisitOrder::TopDown: return "topdown";
    case VisitOrder::Random: return "random";
  }
  return "";
}

VisitOrder parse_visit_order(const std::string& name) {
  if (name == "bottomup") return VisitOrder::BottomUp;
  if (name == "topdown") return VisitOrder::TopDown;
  if (name == "random") return VisitOrder::Random;
  throw ConfigError("unknown order '" + name + "' (expected bottomup, topdown or random)");
}

std::string accuracy_mode_name(AccuracyMode mode) { return mode == AccuracyMode::Labeled ? "labeled" : "agreement"; }

AccuracyMode parse_accuracy_mode(const std::string& name) {
  if (name == "labeled") return AccuracyMode::Labeled;
  if (name == "agreement") return AccuracyMode::Agreement;
  throw ConfigError("unknown accuracy mode '" + name + "' (expected labeled or agreement)");
}

std::string selector_name(SelectorKind kind) {
  switch (kind) {
    case SelectorKind::Cap: return "cap";
    case SelectorKind::L2: return "l2";
    case SelectorKind::Random: return "random";
  }
  return "";
}

SelectorKind parse_selector(const std::string& name) {
  if (name == "cap") return SelectorKind::Cap;
  if (name == "l2") return SelectorKind::L2;
  if (name == "random") return SelectorKind::Random;
  throw ConfigError("unknown selector '" + name + "' (expected cap, l2 or random)");
}

std::vector<std::size_t> layer_order(const Model& model, const std::vector<std::size_t>& prune_layers,
                                     VisitOrder order, std::uint64_t seed) {
  if (prune_layers.empty()) throw ConfigError("no layers to prune");
  const auto prunable = prunable_layers(model);
  std::vector<std::size_t> layers = prune_layers;
  std::sort(layers.begin(), layers.end());
  if (std::adjacent_find(layers.begin(), layers.end()) != layers.end()) {
    throw ConfigError("prune layer list contains duplicates");
  }
  for (auto l : layers) {
    if (std::find(prunable.begin(), prunable.end(), l) == prunable.end()) {
      throw ModelError("layer " + std::to_string(l) + " cannot be pruned");
    }
  }
  switch (order) {
    case VisitOrder::BottomUp:
      break;
    case VisitOrder::TopDown:
      std::reverse(layers.begin(), layers.end());
      break;
    case VisitOrder::Random: {
      const auto perm = seeded_permutation(layers.size(), seed);
      std::vector<std::size_t> shuffled(layers.size());
      for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = layers[perm[i]];
      layers = std::move(shuffled);
      break;
    }
  }
  return layers;
}

std::vector<std::uint32_t> predict(const Model& model, const Tensor& images, std::size_t workers) {
  if (images.rank() != 4) throw ShapeError("predict: expected an NCHW batch");
  const std::size_t n = images.dim(0);
  const std::size_t per_image = images.size() / n;
  std::vector<std::uint32_t> out;
  out.reserve(n);
  for (std::size_t lo = 0; lo < n; lo += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, n - lo);
    std::vector<float> slice(images.data() + lo * per_image, images.data() + (lo + count) * per_image);
    const Tensor batch({count, images.dim(1), images.dim(2), images.dim(3)}, std::move(slice));
    const Tensor logits = forward(model, batch, {}, workers).output;
    const std::size_t classes = logits.size() / count;
    for (std::size_t i = 0; i < count; ++i) {
      const float* row = logits.data() + i * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      out.push_back(static_cast<std::uint32_t>(best));
    }
  }
  return out;
}

double evaluate_accuracy(const Model& model, const Dataset& data, AccuracyMode mode,
                         const std::vector<std::uint32_t>* baseline, std::size_t workers) {
  const std::vector<std::uint32_t>* targets = nullptr;
  if (mode == AccuracyMode::Labeled) {
    if (!data.labels) throw ConfigError("labeled accuracy needs a dataset with labels");
    targets = &*data.labels;
  } else {
    if (!baseline) throw ConfigError("agreement accuracy needs baseline predictions");
    targets = baseline;
  }
  if (targets->size() != data.size()) throw ConfigError("accuracy targets do not match the dataset size");
  if (data.size() == 0) throw ConfigError("accuracy: empty dataset");
  const auto preds = predict(model, data.images, workers);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == (*targets)[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

Selection choose_channels(SelectorKind selector, const Tensor64& w, const LayerStatistics& stats, double sigma,
                          std::uint64_t seed, std::size_t workers) {
  switch (selector) {
    case SelectorKind::Cap:
      return cap_select(w, stats, sigma, workers).selection;
    case SelectorKind::L2:
      return baseline_select(BaselineMethod::L2, w, stats.rows_per_channel, sigma);
    case SelectorKind::Random:
      return baseline_select(BaselineMethod::Random, w, stats.rows_per_channel, sigma, seed);
  }
  throw std::logic_error("unhandled selector");
}

Model prune_at_sparsity(const Model& model, std::size_t layer, const LayerStatistics& stats, double sigma,
                        SelectorKind selector, std::uint64_t seed, std::size_t workers) {
  const Tensor64 w = flattened_weights(model, layer);
  if (w.rows() != stats.dim) {
    throw ConfigError("statistics for layer " + std::to_string(layer) + " have dim " + std::to_string(stats.dim) +
                      " but the layer has " + std::to_string(w.rows()) + " input rows");
  }
  const Selection sel = choose_channels(selector, w, stats, sigma, seed, workers);
  return prune_and_compensate(model, layer, stats, sel);
}

void SearchConfig::validate() const {
  if (!(tolerance >= 0.0 && tolerance < 1.0)) throw ConfigError("tolerance must lie in [0, 1)");
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (workers == 0) throw ConfigError("workers must be >= 1");
}

double SearchReport::flops_drop() const {
  if (flops_before == 0) return 0.0;
  return 1.0 - static_cast<double>(flops_after) / static_cast<double>(flops_before);
}

SearchResult structural_search(const Model& model, const StatisticsBundle& stats, const Dataset& val,
                               const SearchConfig& cfg) {
  cfg.validate();
  const auto visit = layer_order(model, cfg.prune_layers, cfg.order, cfg.order_seed);
  for (auto l : visit) {
    if (!stats.count(l)) throw ConfigError("no statistics for layer " + std::to_string(l));
  }

  SearchReport report;
  report.config = cfg;
  report.flops_before = flops(model).total;

  std::optional<std::vector<std::uint32_t>> baseline_preds;
  if (cfg.accuracy_mode == AccuracyMode::Agreement) baseline_preds = predict(model, val.images, cfg.workers);
  auto accuracy = [&](const Model& m) {
    return evaluate_accuracy(m, val, cfg.accuracy_mode, baseline_preds ? &*baseline_preds : nullptr, cfg.workers);
  };
  report.baseline_accuracy = accuracy(model);

  Model current = model;
  double current_accuracy = report.baseline_accuracy;
  const std::size_t total_layers = visit.size();
  for (std::size_t pos = 0; pos < total_layers; ++pos) {
    const std::size_t layer = visit[pos];
    const LayerStatistics& layer_stats = stats.at(layer);
    LayerVisit rec;
    rec.layer = layer;
    rec.position = pos;
    rec.budget = cfg.step_constraint
                     ? cfg.tolerance * static_cast<double>(pos + 1) / static_cast<double>(total_layers)
                     : cfg.tolerance;
    rec.channels = input_layout(current, layer).channels;
    const std::uint64_t seed = derive_seed(cfg.selector_seed, layer);

    double lo = 0.0, hi = 1.0;
    std::optional<Model> accepted;
    double accepted_accuracy = current_accuracy;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      Probe probe;
      probe.sigma = (lo + hi) / 2.0;
      std::optional<Model> candidate;
      try {
        candidate = prune_at_sparsity(current, layer, layer_stats, probe.sigma, cfg.selector, seed, cfg.workers);
      } catch (const SingularError&) {
        candidate.reset();
      }
      ++report.evaluations;
      double acc = 0.0;
      double drop = std::numeric_limits<double>::infinity();
      if (candidate) {
        acc = accuracy(*candidate);
        drop = report.baseline_accuracy - acc;
        probe.accuracy_drop = drop;
      }
      if (drop >= rec.budget) {
        probe.rejected = true;
        hi = probe.sigma;
      } else {
        lo = probe.sigma;
        accepted = std::move(candidate);
        accepted_accuracy = acc;
      }
      rec.probes.push_back(probe);
    }

    if (lo > 0.0) {
      current = std::move(*accepted);
      current_accuracy = accepted_accuracy;
    }
    rec.sigma = lo;
    rec.retained = input_layout(current, layer).channels;
    rec.accuracy_drop = report.baseline_accuracy - current_accuracy;
    report.visits.push_back(std::move(rec));
  }

  report.final_accuracy = current_accuracy;
  report.flops_after = flops(current).total;
  return {std::move(current), std::move(report)};
}

std::string report_json(const SearchReport& r) {
  nlohmann::ordered_json j;
  j["tolerance"] = r.config.tolerance;
  j["steps"] = r.config.steps;
  j["order"] = visit_order_name(r.config.order);
  j["order_seed"] = r.config.order_seed;
  j["selector"] = selector_name(r.config.selector);
  j["accuracy_mode"] = accuracy_mode_name(r.config.accuracy_mode);
  j["budget_comparison"] = r.config.step_constraint ? "per_layer_cumulative" : "global";
  j["baseline_accuracy"] = r.baseline_accuracy;
  j["final_accuracy"] = r.final_accuracy;
  j["top1_drop"] = r.accuracy_drop();
  j["flops_before"] = r.flops_before;
  j["flops_after"] = r.flops_after;
  j["flops_drop"] = r.flops_drop();
  j["evaluations"] = r.evaluations;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& v : r.visits) {
    nlohmann::ordered_json l;
    l["layer"] = v.layer;
    l["position"] = v.position;
    l["budget"] = v.budget;
    l["sigma"] = v.sigma;
    l["channels"] = v.channels;
    l["retained"] = v.retained;
    l["accuracy_drop"] = v.accuracy_drop;
    auto probes = nlohmann::ordered_json::array();
    for (const auto& p : v.probes) {
      nlohmann::ordered_json pj;
      pj["sigma"] = p.sigma;
      pj["accuracy_drop"] = p.accuracy_drop ? json_number(*p.accuracy_drop) : nlohmann::ordered_json(nullptr);
      pj["singular"] = !p.accuracy_drop.has_value();
      pj["rejected"] = p.rejected;
      probes.push_back(std::move(pj));
    }
    l["probes"] = std::move(probes);
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

std::string report_csv(const SearchReport& r) {
  std::string out = "position,layer,budget,sigma,channels,retained,accuracy_drop\n";
  for (const auto& v : r.visits) {
    out += std::to_string(v.position) + "," + std::to_string(v.layer) + "," + number(v.budget) + "," +
           number(v.sigma) + "," + std::to_string(v.channels) + "," + std::to_string(v.retained) + "," +
           number(v.accuracy_drop) + "\n";
  }
  return out;
}

}  // namespace cprune
