#pragma once

#include <stdexcept>
#include <string>

namespace csmtl {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (model, optimizer, experiment).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced during a forward or backward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Class index outside [0, num_classes).
class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Missing or malformed training data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Internal invariant violated; indicates a bug or corrupted state.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace csmtl
