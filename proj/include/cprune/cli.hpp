#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace cprune {

/// Every knob of a command-line run. Empty strings and empty lists mean
/// "not set"; they are resolved against the loaded model and data before a
/// command runs.
struct RunConfig {
  std::string model;
  std::string data;
  std::string data_format = "cifar10";
  std::size_t synth = 0;
  double frac = 1.0;
  std::string val;
  std::string val_format;
  std::string reference;
  double tolerance = 0.01;
  std::size_t steps = 3;
  std::string order = "bottomup";
  std::uint64_t seed = 0;
  std::size_t patches = 32;
  std::string selector = "cap";
  std::string acc_mode = "auto";
  bool no_step_constraint = false;
  bool unweighted = false;
  std::string out = "out";
  std::size_t workers = 1;
  std::vector<std::size_t> layers;
  std::vector<double> sigmas;
  std::vector<double> grid{0.0, 0.25, 0.5, 0.75};
  std::size_t random_seeds = 5;
  bool with_accuracy = false;
  std::string stats_dir;
};

/// Exit codes of the command-line driver.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitFormat = 3;

/// Parses `argv` (including the program name) and runs one command,
/// writing progress to `out` and diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// JSON text of a config with every field present.
std::string config_to_json(const RunConfig& cfg);
/// Overlays the keys of a JSON object onto `cfg`; unknown keys are a
/// ConfigError.
void apply_config_json(RunConfig& cfg, const std::string& text);

}  // namespace cprune
