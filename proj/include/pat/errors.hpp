#pragma once

#include <stdexcept>
#include <string>

namespace pat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Index outside a valid range (token ids, embedding rows).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong stage of the model lifecycle
/// (double LoRA merge, slicing before HSM merge, ...).
class LifecycleError : public Error {
 public:
  using Error::Error;
};

/// Invalid input data (empty batch, empty corpus).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value detected during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent checkpoint / file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace pat
