// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace protoprompt {

enum class ErrorKind {
  DegenerateVector,
  EmptyInput,
  ShapeError,
  ConfigError,
  TraceError,
  FrozenError,
  AnchorlessSample,
  EmptyStore,
  DuplicateTask,
  DuplicateClass,
  FormatError,
  KeyError,
  LeakageError,
  IncompleteMatrix,
  UndefinedForgetting,
  MissingFile,
  NumericError,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries one of the kinds above so the
/// CLI can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace protoprompt
