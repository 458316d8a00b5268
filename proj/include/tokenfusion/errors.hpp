#pragma once

#include <stdexcept>
#include <string>

namespace tokenfusion {

/// Bad or inconsistent run configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Missing, truncated or malformed dataset (CLI exit code 2).
struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values or a failed numerical verification (CLI exit code 3).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Stored weights incompatible with the configured model (CLI exit code 4).
struct WeightsMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tokenfusion
