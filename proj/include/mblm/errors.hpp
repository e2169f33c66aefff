#pragma once

#include <stdexcept>
#include <string>

namespace mblm {

// Error taxonomy mirrored by the CLI exit codes: config=2, data=3, contract=4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape and structure violations are contract errors.
struct ShapeError : ContractError {
  using ContractError::ContractError;
};

}  // namespace mblm
