#pragma once

#include <stdexcept>
#include <string>

namespace grlvr {

/// Caller supplied something outside an operation's contract.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN/Inf (or other numeric breakdown) was produced.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A measured architectural constant would be zero, which voids the bounds.
class DegenerateConstantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config file or override failed to parse/validate.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace grlvr
