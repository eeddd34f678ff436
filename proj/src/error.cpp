// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/error.hpp"

namespace protoprompt {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::DegenerateVector: return "DegenerateVector";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::TraceError: return "TraceError";
    case ErrorKind::FrozenError: return "FrozenError";
    case ErrorKind::AnchorlessSample: return "AnchorlessSample";
    case ErrorKind::EmptyStore: return "EmptyStore";
    case ErrorKind::DuplicateTask: return "DuplicateTask";
    case ErrorKind::DuplicateClass: return "DuplicateClass";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::KeyError: return "KeyError";
    case ErrorKind::LeakageError: return "LeakageError";
    case ErrorKind::IncompleteMatrix: return "IncompleteMatrix";
    case ErrorKind::UndefinedForgetting: return "UndefinedForgetting";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::NumericError: return "NumericError";
  }
  return "Unknown";
}

}  // namespace protoprompt
