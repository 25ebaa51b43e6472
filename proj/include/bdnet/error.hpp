#pragma once

#include <stdexcept>
#include <string>

namespace bdnet {

/// Caller passed arguments that violate an operation's contract
/// (shape mismatch, out-of-range count, unsupported grouping).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A domain type's invariant does not hold (e.g. alpha1 > alpha2).
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or truncated serialized data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bdnet
