#pragma once

#include <stdexcept>
#include <string>

namespace wmhseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or image extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Architectural or run configuration that cannot be honored.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violating a documented domain (non-binary target, bad spacing, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedTypeError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward through a non-scalar without a seed.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace wmhseg
