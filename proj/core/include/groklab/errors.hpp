#pragma once

#include <stdexcept>
#include <string>

namespace groklab {

/// Base of every error raised by the library. The CLI maps `InputError`
/// subclasses to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed configs, missing files, out-of-range arguments.
class InputError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public InputError {
 public:
  using InputError::InputError;
};

class IndexError : public InputError {
 public:
  using InputError::InputError;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

class CapacityError : public InputError {
 public:
  using InputError::InputError;
};

class RoutingError : public InputError {
 public:
  using InputError::InputError;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace groklab
