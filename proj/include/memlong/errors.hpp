#pragma once

#include <stdexcept>
#include <string>

namespace memlong {

// Invalid configuration or arguments. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf or otherwise undefined numerical state. The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or contract violation in a tensor operation.
class ShapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A retrieved chunk that is not strictly older than the local window.
class LeakageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed, truncated or mismatched checkpoint file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Decoding a special (non-byte) token.
class TokenError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace memlong
