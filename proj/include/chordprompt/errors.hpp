// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace chordprompt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, bad index, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Input is well-formed but numerically degenerate (zero vector, zero-norm sum).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

/// Malformed binary artifact. `offset()` is the byte position where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class FileError : public Error {
 public:
  using Error::Error;
};

#define CP_REQUIRE(cond, msg)                                  \
  do {                                                         \
    if (!(cond)) throw ::chordprompt::ContractViolation(msg);  \
  } while (0)

}  // namespace chordprompt
