#pragma once

#include <stdexcept>
#include <string>

namespace oraclesage {

/// Shape or width mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller violated an operation's precondition (non-scalar loss, empty split, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad configuration value, unknown key, or a freeze pattern that matched nothing.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or invalid input data (annotations, images, snapshots).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Too few items to split, or a request larger than the generator can satisfy.
class SizingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A NaN or infinity appeared in a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace oraclesage
