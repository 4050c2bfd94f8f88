#pragma once

#include <stdexcept>
#include <string>

namespace npepfn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched matrix widths, row counts or dimensionalities.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; the message names the offending line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Raised by a backend when a call violates its contract.
class BackendError : public Error {
 public:
  using Error::Error;
};

}  // namespace npepfn
