#pragma once

#include <stdexcept>
#include <string>

namespace punet {

// Error taxonomy shared by the library and the C API / CLI exit codes:
// config/argument/contract problems -> 2, numeric failures (NaN) -> 3,
// filesystem problems -> 4.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArgError : std::runtime_error {
  explicit ArgError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatch between tensors.
struct DimError : std::runtime_error {
  explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated an API contract (non-scalar loss, missing gradient, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace punet
