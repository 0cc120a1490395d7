#pragma once

#include <stdexcept>
#include <string>

namespace flowsurrogate {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Layer or architecture geometry that cannot be realized (bad sizes, kernels,
/// channel counts).
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not agree for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-convergence, non-finite values, failed factorizations, CFL violations.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Missing, malformed or corrupted files and manifests.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace flowsurrogate
