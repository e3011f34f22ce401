#pragma once

#include <stdexcept>
#include <string>

namespace damsgrad {

/// Vector/matrix lengths or shapes that do not agree.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or Inf where a finite value is required.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Hyperparameters outside their admissible range, or used in a regime an
/// operation does not support.
class ModeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace damsgrad
