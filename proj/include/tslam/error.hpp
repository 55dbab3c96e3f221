#pragma once

#include <stdexcept>
#include <string>

namespace tslam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or usage (CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data (CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during training (CLI exit code 3).
class DivergenceError : public Error {
 public:
  DivergenceError() : Error("divergence detected") {}
  explicit DivergenceError(const std::string& detail)
      : Error("divergence detected: " + detail) {}
};

/// Network-level failure talking to a remote endpoint. Retryable.
class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace tslam
