#pragma once

#include <stdexcept>

namespace cprune {

/// Malformed, truncated or mismatched model, dataset or statistics file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A model whose layers are not a consistent sequential chain, or a request
/// that the model structure cannot satisfy (e.g. pruning the input channels
/// of the first convolution).
class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid user configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace cprune
