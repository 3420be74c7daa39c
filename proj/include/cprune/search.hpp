#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cprune/cap.hpp"
#include "cprune/dataset.hpp"
#include "cprune/model.hpp"
#include "cprune/statistics.hpp"

namespace cprune {

enum class VisitOrder { BottomUp, TopDown, Random };
enum class AccuracyMode { Labeled, Agreement };
enum class SelectorKind { Cap, L2, Random };

std::string visit_order_name(VisitOrder order);
VisitOrder parse_visit_order(const std::string& name);
std::string accuracy_mode_name(AccuracyMode mode);
AccuracyMode parse_accuracy_mode(const std::string& name);
std::string selector_name(SelectorKind kind);
SelectorKind parse_selector(const std::string& name);

/// Statistics per layer index, estimated once on the un-pruned model.
using StatisticsBundle = std::map<std::size_t, LayerStatistics>;

/// Visiting sequence over `prune_layers`: inference order, its reverse, or a
/// seeded permutation. Throws ConfigError on an empty list and ModelError on
/// a layer that cannot be pruned.
std::vector<std::size_t> layer_order(const Model& model, const std::vector<std::size_t>& prune_layers,
                                     VisitOrder order, std::uint64_t seed);

/// Arg-max class per example, ties broken by the lowest class index.
std::vector<std::uint32_t> predict(const Model& model, const Tensor& images, std::size_t workers = 1);

/// Top-1 accuracy against the dataset labels (Labeled) or against
/// `baseline` predictions of the un-pruned model (Agreement). Throws
/// ConfigError when the required targets are missing.
double evaluate_accuracy(const Model& model, const Dataset& data, AccuracyMode mode,
                         const std::vector<std::uint32_t>* baseline = nullptr, std::size_t workers = 1);

/// Channels kept at sparsity `sigma` by the chosen selector. `seed` only
/// matters for the random selector.
Selection choose_channels(SelectorKind selector, const Tensor64& w, const LayerStatistics& stats, double sigma,
                          std::uint64_t seed, std::size_t workers = 1);

/// Selects, prunes and compensates one layer at sparsity `sigma`.
Model prune_at_sparsity(const Model& model, std::size_t layer, const LayerStatistics& stats, double sigma,
                        SelectorKind selector, std::uint64_t seed, std::size_t workers = 1);

struct SearchConfig {
  double tolerance = 0.01;
  std::size_t steps = 3;
  VisitOrder order = VisitOrder::BottomUp;
  std::uint64_t order_seed = 0;
  AccuracyMode accuracy_mode = AccuracyMode::Labeled;
  std::vector<std::size_t> prune_layers;
  /// false compares every probe against the whole tolerance instead of the
  /// cumulative per-layer budget.
  bool step_constraint = true;
  SelectorKind selector = SelectorKind::Cap;
  std::uint64_t selector_seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

struct Probe {
  double sigma = 0.0;
  std::optional<double> accuracy_drop;  // nullopt: singular selection
  bool rejected = false;
};

struct LayerVisit {
  std::size_t layer = 0;
  std::size_t position = 0;
  double budget = 0.0;
  double sigma = 0.0;
  std::size_t channels = 0;
  std::size_t retained = 0;
  double accuracy_drop = 0.0;
  std::vector<Probe> probes;
};

struct SearchReport {
  SearchConfig config;
  std::vector<LayerVisit> visits;
  double baseline_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::uint64_t flops_before = 0;
  std::uint64_t flops_after = 0;
  std::size_t evaluations = 0;

  double accuracy_drop() const { return baseline_accuracy - final_accuracy; }
  double flops_drop() const;
};

struct SearchResult {
  Model model;
  SearchReport report;
};

/// Binary structural search. Layer i of L in visiting order gets the
/// cumulative budget tolerance * (i+1) / L. Each of `steps` probes prunes the
/// current model at the midpoint sparsity on a copy and keeps the lower half
/// when the accuracy drop reaches the budget, the upper half otherwise. The
/// best accepted probe is then kept. A probe whose selection is singular
/// counts as an infinite drop.
SearchResult structural_search(const Model& model, const StatisticsBundle& stats, const Dataset& val,
                               const SearchConfig& cfg);

/// JSON with a fixed key order, and CSV with one row per layer visit.
std::string report_json(const SearchReport& report);
std::string report_csv(const SearchReport& report);

}  // namespace cprune
