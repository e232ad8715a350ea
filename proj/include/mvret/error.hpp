#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mvret {

enum class ErrorKind {
  shape,       // tensor extents disagree with an op's contract
  format,      // on-disk bytes cannot be parsed
  validation,  // a dataset or config invariant is violated
  io,          // filesystem failure
  numeric,     // non-finite value or degenerate statistics
  config,      // invalid user-supplied option
  unavailable, // an optional input (e.g. CLIP features) is missing
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace mvret
