#pragma once

#include <stdexcept>
#include <string>

namespace adabldm {

// Base class so callers (CLI, bindings) can map failures to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Invalid argument, shape mismatch or out-of-range configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "parameter_error"; }
};

/// A documented precondition on the data (not the configuration) was violated.
class PreconditionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "precondition_error"; }
};

/// Operation requested on an object in the wrong lifecycle state
/// (untrained bundle, missing checkpoint, ...).
class StateError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "state_error"; }
};

/// A defect mask could not be placed inside the foreground.
class FitError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "fit_error"; }
};

/// Foreground estimation found no usable foreground.
class DegenerateForegroundError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "degenerate_foreground"; }
};

/// A metric is undefined for the given ground truth (e.g. one class only).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "undefined_metric"; }
};

/// Bad command line or configuration file.
class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage_error"; }
};

#define ADABLDM_CHECK(cond, ErrorType, msg)      \
  do {                                           \
    if (!(cond)) throw ErrorType(std::string(msg)); \
  } while (0)

}  // namespace adabldm
