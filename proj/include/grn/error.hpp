#pragma once

#include <stdexcept>
#include <string>

namespace grn {

// Error taxonomy. The CLI maps each kind onto a distinct exit code.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or length mismatch between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced during training or a forward/backward pass.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A reference set touched a held-out subject (or the sample's own subject).
struct LeakageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace grn
