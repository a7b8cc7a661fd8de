#pragma once

#include <stdexcept>

namespace promptlab {

// One exception type per contract failure kind, so callers and tests can
// catch precisely instead of string-matching.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Domain violations: bad argument values, empty inputs, out-of-range settings.
struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Non-finite values where finite math is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or corrupted serialized artifacts (checkpoints, datasets).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: operations invoked out of contract order (double backward,
// shifting an already-shifted sample, adapting an unfrozen model, ...).
struct ProtocolError : std::logic_error {
  using std::logic_error::logic_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DeterminismError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace promptlab
