#pragma once

#include <stdexcept>
#include <string>

namespace preroute {

/// Base class for every error raised by the library. Messages name the
/// offending element (node id, edge, parameter path, file) so callers can
/// surface them unchanged.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed document or structurally invalid circuit.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Inputs that violate an operation's preconditions.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss or gradient).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace preroute
