#pragma once

#include <stdexcept>
#include <string>

namespace corrcount {

/// Violated precondition or shape contract of an operation.
struct ContractViolation : std::invalid_argument {
  explicit ContractViolation(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Non-finite values where the pipeline requires finite ones.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed files, unwritable paths, truncated payloads.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration detected at construction time.
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace corrcount
