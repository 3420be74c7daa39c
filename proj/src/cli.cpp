#include "cprune/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cprune/cap.hpp"
#include "cprune/compensation.hpp"
#include "cprune/dataset.hpp"
#include "cprune/model.hpp"
#include "cprune/search.hpp"
#include "cprune/statistics.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace cprune {

namespace {

// Named sub-seed streams; every random choice of a run derives from the
// global seed through one of these.
enum SeedStream : std::uint64_t {
  kStreamSplit = 1,
  kStreamSynth = 2,
  kStreamStats = 3,
  kStreamOrder = 4,
  kStreamSelector = 5,
};

template <class F>
void for_each_field(RunConfig& c, F&& f) {
  f("model", c.model);
  f("data", c.data);
  f("data_format", c.data_format);
  f("synth", c.synth);
  f("frac", c.frac);
  f("val", c.val);
  f("val_format", c.val_format);
  f("reference", c.reference);
  f("tolerance", c.tolerance);
  f("steps", c.steps);
  f("order", c.order);
  f("seed", c.seed);
  f("patches", c.patches);
  f("selector", c.selector);
  f("acc_mode", c.acc_mode);
  f("no_step_constraint", c.no_step_constraint);
  f("unweighted", c.unweighted);
  f("out", c.out);
  f("workers", c.workers);
  f("layers", c.layers);
  f("sigmas", c.sigmas);
  f("grid", c.grid);
  f("random_seeds", c.random_seeds);
  f("with_accuracy", c.with_accuracy);
  f("stats_dir", c.stats_dir);
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const std::string& path, const std::string& flag) {
  if (!path.empty() && !fs::exists(path)) throw ConfigError(flag + ": no such file '" + path + "'");
}

ojson flops_json(const Model& model) {
  const auto report = flops(model);
  ojson layers = ojson::array();
  for (const auto& [layer, count] : report.per_layer) {
    ojson l;
    l["layer"] = layer;
    l["kind"] = layer_kind_name(model.layers[layer]);
    l["flops"] = count;
    layers.push_back(std::move(l));
  }
  ojson j;
  j["total"] = report.total;
  j["layers"] = std::move(layers);
  return j;
}

class Run {
 public:
  Run(RunConfig cfg, std::ostream& out, std::ostream& err) : cfg_(std::move(cfg)), out_(out), err_(err) {}

  int stats();
  int search();
  int prune();
  int eval();
  int flops_cmd();
  int compare();

 private:
  void check_common();
  void load_model_file();
  void write_config();
  fs::path out_dir() const { return cfg_.out; }
  const Dataset& estimation();
  const Dataset& validation();
  AccuracyMode resolve_acc_mode();
  std::vector<std::size_t> resolve_layers(bool all_prunable);
  StatisticsBundle obtain_stats(const std::vector<std::size_t>& layers);
  LayerStatistics layer_stats(std::size_t layer);

  RunConfig cfg_;
  std::ostream& out_;
  std::ostream& err_;
  Model model_;
  std::optional<Dataset> estimation_;
  std::optional<Dataset> validation_;
};

void Run::check_common() {
  if (cfg_.model.empty()) throw ConfigError("--model is required");
  require_file(cfg_.model, "--model");
  require_file(cfg_.data, "--data");
  require_file(cfg_.val, "--val");
  require_file(cfg_.reference, "--reference");
  if (!cfg_.stats_dir.empty() && !fs::is_directory(cfg_.stats_dir)) {
    throw ConfigError("--stats-dir: no such directory '" + cfg_.stats_dir + "'");
  }
  if (!(cfg_.frac > 0.0 && cfg_.frac <= 1.0)) throw ConfigError("--frac must lie in (0, 1]");
  if (!(cfg_.tolerance >= 0.0 && cfg_.tolerance < 1.0)) throw ConfigError("--tol must lie in [0, 1)");
  if (cfg_.steps == 0) throw ConfigError("--steps must be >= 1");
  if (cfg_.patches == 0) throw ConfigError("--patches must be >= 1");
  if (cfg_.workers == 0) throw ConfigError("--workers must be >= 1");
  if (cfg_.val_format.empty()) cfg_.val_format = cfg_.data_format;
  parse_dataset_format(cfg_.data_format);
  parse_dataset_format(cfg_.val_format);
  parse_visit_order(cfg_.order);
  parse_selector(cfg_.selector);
  if (cfg_.acc_mode != "auto") parse_accuracy_mode(cfg_.acc_mode);
  for (double s : cfg_.sigmas)
    if (!(s >= 0.0 && s < 1.0)) throw ConfigError("--sigma values must lie in [0, 1)");
  for (double s : cfg_.grid)
    if (!(s >= 0.0 && s < 1.0)) throw ConfigError("--grid values must lie in [0, 1)");
  load_model_file();
}

void Run::load_model_file() { model_ = load_model(cfg_.model); }

void Run::write_config() {
  fs::create_directories(out_dir());
  write_text(out_dir() / "config.json", config_to_json(cfg_));
}

const Dataset& Run::estimation() {
  if (estimation_) return *estimation_;
  const auto& in = model_.input_shape;
  if (cfg_.synth > 0) {
    estimation_ = synth_normal(cfg_.synth, in[0], in[1], in[2], derive_seed(cfg_.seed, kStreamSynth));
  } else {
    if (cfg_.data.empty()) throw ConfigError("statistics need --data or --synth");
    Dataset full = load_dataset(cfg_.data, parse_dataset_format(cfg_.data_format));
    if (cfg_.frac < 1.0) {
      full = std::move(split(full, {cfg_.frac, 1.0 - cfg_.frac}, derive_seed(cfg_.seed, kStreamSplit))[0]);
    }
    estimation_ = std::move(full);
  }
  return *estimation_;
}

const Dataset& Run::validation() {
  if (validation_) return *validation_;
  if (!cfg_.val.empty()) {
    validation_ = load_dataset(cfg_.val, parse_dataset_format(cfg_.val_format));
  } else if (!cfg_.data.empty()) {
    validation_ = load_dataset(cfg_.data, parse_dataset_format(cfg_.data_format));
  } else {
    throw ConfigError("accuracy needs --val or --data");
  }
  return *validation_;
}

AccuracyMode Run::resolve_acc_mode() {
  if (cfg_.acc_mode == "auto") cfg_.acc_mode = validation().labels ? "labeled" : "agreement";
  return parse_accuracy_mode(cfg_.acc_mode);
}

std::vector<std::size_t> Run::resolve_layers(bool all_prunable) {
  if (cfg_.layers.empty()) cfg_.layers = all_prunable ? prunable_layers(model_) : default_prune_layers(model_);
  if (cfg_.layers.empty()) throw ModelError("the model has no prunable layers");
  const auto prunable = prunable_layers(model_);
  for (auto l : cfg_.layers) {
    if (std::find(prunable.begin(), prunable.end(), l) == prunable.end()) {
      throw ConfigError("--layers: layer " + std::to_string(l) + " cannot be pruned");
    }
  }
  return cfg_.layers;
}

LayerStatistics Run::layer_stats(std::size_t layer) {
  if (!cfg_.stats_dir.empty()) {
    const fs::path cached = fs::path(cfg_.stats_dir) / ("layer_" + std::to_string(layer) + ".cpst");
    if (fs::exists(cached)) {
      LayerStatistics s = load_statistics(cached);
      const InputLayout layout = input_layout(model_, layer);
      if (s.dim != layout.rows() || s.rows_per_channel != layout.rows_per_channel) {
        throw FormatError(cached.string() + " does not match layer " + std::to_string(layer));
      }
      return s;
    }
  }
  StatisticsOptions opts;
  opts.patches_per_image = cfg_.patches;
  opts.seed = derive_seed(derive_seed(cfg_.seed, kStreamStats), layer);
  opts.weighted = !cfg_.unweighted;
  opts.workers = cfg_.workers;
  try {
    return estimate_statistics(model_, estimation(), layer, opts);
  } catch (const DeadActivationError&) {
    err_ << "notice: layer " << layer
         << " has no live activations on the estimation data; falling back to unweighted statistics\n";
    opts.weighted = false;
    return estimate_statistics(model_, estimation(), layer, opts);
  }
}

StatisticsBundle Run::obtain_stats(const std::vector<std::size_t>& layers) {
  StatisticsBundle bundle;
  for (auto l : layers) bundle.emplace(l, layer_stats(l));
  return bundle;
}

int Run::stats() {
  check_common();
  const auto layers = resolve_layers(true);
  write_config();
  const fs::path dir = out_dir() / "stats";
  fs::create_directories(dir);
  for (auto l : layers) {
    const LayerStatistics s = layer_stats(l);
    save_statistics(s, dir / ("layer_" + std::to_string(l) + ".cpst"));
    out_ << "layer " << l << ": dim=" << s.dim << " rows_per_channel=" << s.rows_per_channel
         << " samples=" << number(s.sample_count) << " weight_sum=" << number(s.weight_sum) << "\n";
  }
  return kExitOk;
}

int Run::search() {
  check_common();
  const auto layers = resolve_layers(false);
  SearchConfig sc;
  sc.tolerance = cfg_.tolerance;
  sc.steps = cfg_.steps;
  sc.order = parse_visit_order(cfg_.order);
  sc.order_seed = derive_seed(cfg_.seed, kStreamOrder);
  sc.accuracy_mode = resolve_acc_mode();
  sc.prune_layers = layers;
  sc.step_constraint = !cfg_.no_step_constraint;
  sc.selector = parse_selector(cfg_.selector);
  sc.selector_seed = derive_seed(cfg_.seed, kStreamSelector);
  sc.workers = cfg_.workers;
  write_config();

  const StatisticsBundle bundle = obtain_stats(layers);
  const SearchResult result = structural_search(model_, bundle, validation(), sc);
  save_model(result.model, out_dir() / "pruned.cprn");
  write_text(out_dir() / "search_report.json", report_json(result.report));
  write_text(out_dir() / "search_report.csv", report_csv(result.report));
  ojson f;
  f["before"] = flops_json(model_);
  f["after"] = flops_json(result.model);
  f["flops_drop"] = result.report.flops_drop();
  write_text(out_dir() / "flops.json", f.dump(2) + "\n");
  out_ << "top1_drop=" << number(result.report.accuracy_drop()) << " flops_drop=" << number(result.report.flops_drop())
       << "\n";
  return kExitOk;
}

int Run::prune() {
  check_common();
  const auto layers = resolve_layers(false);
  if (cfg_.sigmas.empty()) throw ConfigError("prune needs --sigma (one value, or one per layer)");
  if (cfg_.sigmas.size() != 1 && cfg_.sigmas.size() != layers.size()) {
    throw ConfigError("--sigma takes one value or one per pruned layer");
  }
  write_config();
  const StatisticsBundle bundle = obtain_stats(layers);
  const SelectorKind selector = parse_selector(cfg_.selector);
  const std::uint64_t selector_seed = derive_seed(cfg_.seed, kStreamSelector);
  Model pruned = model_;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const double sigma = cfg_.sigmas.size() == 1 ? cfg_.sigmas[0] : cfg_.sigmas[i];
    if (sigma == 0.0) continue;
    pruned = prune_at_sparsity(pruned, layers[i], bundle.at(layers[i]), sigma, selector,
                               derive_seed(selector_seed, layers[i]), cfg_.workers);
  }
  save_model(pruned, out_dir() / "pruned.cprn");
  ojson f;
  f["before"] = flops_json(model_);
  f["after"] = flops_json(pruned);
  const double before = static_cast<double>(flops(model_).total);
  const double drop = before > 0 ? 1.0 - static_cast<double>(flops(pruned).total) / before : 0.0;
  f["flops_drop"] = drop;
  write_text(out_dir() / "flops.json", f.dump(2) + "\n");
  out_ << "flops_drop=" << number(drop) << "\n";
  return kExitOk;
}

int Run::eval() {
  check_common();
  const AccuracyMode mode = resolve_acc_mode();
  if (mode == AccuracyMode::Agreement && cfg_.reference.empty()) {
    throw ConfigError("agreement accuracy needs --reference (the un-pruned model)");
  }
  write_config();
  std::optional<std::vector<std::uint32_t>> baseline;
  if (mode == AccuracyMode::Agreement) baseline = predict(load_model(cfg_.reference), validation().images, cfg_.workers);
  const double top1 = evaluate_accuracy(model_, validation(), mode, baseline ? &*baseline : nullptr, cfg_.workers);
  ojson j;
  j["mode"] = cfg_.acc_mode;
  j["examples"] = validation().size();
  j["top1"] = top1;
  write_text(out_dir() / "eval.json", j.dump(2) + "\n");
  out_ << "top1=" << number(top1) << "\n";
  return kExitOk;
}

int Run::flops_cmd() {
  check_common();
  write_config();
  const ojson j = flops_json(model_);
  write_text(out_dir() / "flops.json", j.dump(2) + "\n");
  for (const auto& l : j["layers"]) {
    out_ << "layer " << l["layer"].get<std::size_t>() << " " << l["kind"].get<std::string>() << " "
         << l["flops"].get<std::uint64_t>() << "\n";
  }
  out_ << "total=" << j["total"].get<std::uint64_t>() << "\n";
  return kExitOk;
}

int Run::compare() {
  check_common();
  const auto layers = resolve_layers(false);
  std::optional<AccuracyMode> mode;
  if (cfg_.with_accuracy) mode = resolve_acc_mode();
  write_config();
  const StatisticsBundle bundle = obtain_stats(layers);

  std::optional<std::vector<std::uint32_t>> baseline;
  if (mode == AccuracyMode::Agreement) baseline = predict(model_, validation().images, cfg_.workers);
  const std::uint64_t selector_seed = derive_seed(cfg_.seed, kStreamSelector);

  std::string csv = "layer,selector,seed,sigma,recon_loss,top1\n";
  for (auto layer : layers) {
    const LayerStatistics& stats = bundle.at(layer);
    const Tensor64 w = flattened_weights(model_, layer);
    struct Variant {
      SelectorKind kind;
      std::optional<std::size_t> seed;
    };
    std::vector<Variant> variants{{SelectorKind::Cap, std::nullopt}, {SelectorKind::L2, std::nullopt}};
    for (std::size_t r = 0; r < cfg_.random_seeds; ++r) variants.push_back({SelectorKind::Random, r});

    for (const auto& v : variants) {
      const std::uint64_t seed = v.seed ? derive_seed(derive_seed(selector_seed, layer), *v.seed) : 0;
      for (double sigma : cfg_.grid) {
        const Selection sel = choose_channels(v.kind, w, stats, sigma, seed, cfg_.workers);
        std::string loss, top1;
        try {
          loss = number(reconstruction_loss(w, stats, sel));
          if (mode) {
            const Model pruned = prune_and_compensate(model_, layer, stats, sel);
            top1 = number(
                evaluate_accuracy(pruned, validation(), *mode, baseline ? &*baseline : nullptr, cfg_.workers));
          }
        } catch (const SingularError&) {
          // Left blank: the retained statistics are singular even with the ridge.
        }
        csv += std::to_string(layer) + "," + selector_name(v.kind) + "," + (v.seed ? std::to_string(*v.seed) : "") +
               "," + number(sigma) + "," + loss + "," + top1 + "\n";
      }
    }
  }
  write_text(out_dir() / "compare.csv", csv);
  out_ << "wrote " << (out_dir() / "compare.csv").string() << "\n";
  return kExitOk;
}

// Binds a CLI option to a field of `scratch` and remembers how to copy it
// into the final config when the option was given on the command line.
struct Binder {
  RunConfig scratch;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> bound;

  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& flag, T RunConfig::*member, const std::string& desc) {
    CLI::Option* opt = nullptr;
    if constexpr (std::is_same_v<T, bool>) {
      opt = app->add_flag(flag, scratch.*member, desc);
    } else {
      opt = app->add_option(flag, scratch.*member, desc);
    }
    bound.emplace_back(opt, [this, member](RunConfig& dst) { dst.*member = scratch.*member; });
    return opt;
  }
};

void add_shared(CLI::App* app, Binder& b, std::string& config_path) {
  app->add_option("--config", config_path, "JSON config file; command-line flags override its values");
  b.add(app, "--model", &RunConfig::model, "input model (.cprn)");
  b.add(app, "--data", &RunConfig::data, "dataset for estimation (and validation when --val is absent)");
  b.add(app, "--data-format", &RunConfig::data_format, "cifar10 or raw");
  b.add(app, "--synth", &RunConfig::synth, "estimate on N synthetic standard-normal images instead of --data");
  b.add(app, "--frac", &RunConfig::frac, "fraction of --data used for estimation");
  b.add(app, "--val", &RunConfig::val, "validation dataset");
  b.add(app, "--val-format", &RunConfig::val_format, "cifar10 or raw (defaults to --data-format)");
  b.add(app, "--tol", &RunConfig::tolerance, "accuracy-drop tolerance");
  b.add(app, "--steps", &RunConfig::steps, "binary-search steps per layer");
  b.add(app, "--order", &RunConfig::order, "bottomup, topdown or random");
  b.add(app, "--seed", &RunConfig::seed, "global seed");
  b.add(app, "--patches", &RunConfig::patches, "patches sampled per image for conv statistics");
  b.add(app, "--selector", &RunConfig::selector, "cap, l2 or random");
  b.add(app, "--acc-mode", &RunConfig::acc_mode, "labeled or agreement (default: labeled when labels exist)");
  b.add(app, "--no-step-constraint", &RunConfig::no_step_constraint, "compare every probe against the whole tolerance");
  b.add(app, "--unweighted", &RunConfig::unweighted, "estimate statistics without activation-derivative weights");
  b.add(app, "--out", &RunConfig::out, "output directory");
  b.add(app, "--workers", &RunConfig::workers, "worker threads (results do not depend on it)");
  b.add(app, "--layers", &RunConfig::layers, "layer indices to prune")->delimiter(',');
  b.add(app, "--stats-dir", &RunConfig::stats_dir, "directory of cached layer_<i>.cpst files");
}

}  // namespace

std::string config_to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  ojson j = ojson::object();
  for_each_field(copy, [&](const char* key, const auto& value) { j[key] = value; });
  return j.dump(2) + "\n";
}

void apply_config_json(RunConfig& cfg, const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  std::set<std::string> known;
  for_each_field(cfg, [&](const char* key, auto&) { known.insert(key); });
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("config file: unknown key '" + key + "'");
  }
  for_each_field(cfg, [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j[key].template get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("config file: bad value for '") + key + "'");
    }
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Channel pruning with closed-form compensation"};
  app.require_subcommand(1);
  Binder b;
  std::string config_path;

  auto* stats = app.add_subcommand("stats", "estimate and cache per-layer statistics");
  auto* search = app.add_subcommand("search", "binary structural search for per-layer sparsity");
  auto* prune = app.add_subcommand("prune", "prune at fixed per-layer sparsity");
  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a model");
  auto* flops_app = app.add_subcommand("flops", "per-layer FLOPs of a model");
  auto* compare = app.add_subcommand("compare", "reconstruction loss of each selector over a sparsity grid");
  for (auto* sub : {stats, search, prune, eval, flops_app, compare}) add_shared(sub, b, config_path);
  b.add(prune, "--sigma", &RunConfig::sigmas, "sparsity, one value or one per layer")->delimiter(',');
  b.add(eval, "--reference", &RunConfig::reference, "un-pruned model for agreement accuracy");
  b.add(compare, "--grid", &RunConfig::grid, "sparsity grid")->delimiter(',');
  b.add(compare, "--random-seeds", &RunConfig::random_seeds, "number of random-selector seeds");
  b.add(compare, "--with-accuracy", &RunConfig::with_accuracy, "also evaluate accuracy after each single-layer prune");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_json(cfg, read_text(config_path));
    for (auto& [opt, copy] : b.bound)
      if (opt->count() > 0) copy(cfg);

    Run run(std::move(cfg), out, err);
    if (*stats) return run.stats();
    if (*search) return run.search();
    if (*prune) return run.prune();
    if (*eval) return run.eval();
    if (*flops_app) return run.flops_cmd();
    return run.compare();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ModelError& e) {
    err << "model error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace cprune
