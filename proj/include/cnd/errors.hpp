#pragma once

#include <stdexcept>
#include <string>

namespace cnd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent dimensions or invalid hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed caller input (wrong resolution, out-of-range pixels, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A frozen backend produced non-finite output.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// A value the math is undefined for (zero-norm feature, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or activation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Metric is undefined for the given labels (single class, no regions).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint was written by a model with a different configuration.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// Dataset layout violates the train/test/ground_truth contract.
class DatasetIntegrityError : public Error {
 public:
  using Error::Error;
};

/// Prefixes a pipeline stage name to an error while keeping its type.
template <typename E>
[[noreturn]] void rethrow_with_stage(const std::string& stage, const E& e) {
  throw E(stage + ": " + e.what());
}

}  // namespace cnd
