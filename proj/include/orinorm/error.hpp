#pragma once

#include <stdexcept>
#include <string>

namespace orinorm {

// Malformed or inconsistent input data: bad files, mismatched lengths,
// degenerate geometry. Preconditions on call arguments use
// std::invalid_argument instead.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values reached a computation that requires finite input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace orinorm
