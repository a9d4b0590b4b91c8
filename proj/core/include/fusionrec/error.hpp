#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fusionrec {

enum class ErrorKind {
  kInvalidArgument,
  kParse,
  kNotFound,
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncatedPayload,
  kShapeMismatch,
  kDuplicateName,
  kNonFinite,
  kDiverged,
  kConfig,
};

std::string_view to_string(ErrorKind kind);

// All library failures surface as this exception; `kind()` lets callers
// distinguish e.g. a corrupt container from a missing file.
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

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kNotFound: return "not found";
    case ErrorKind::kIo: return "i/o error";
    case ErrorKind::kBadMagic: return "bad magic";
    case ErrorKind::kVersionMismatch: return "version mismatch";
    case ErrorKind::kTruncatedPayload: return "truncated payload";
    case ErrorKind::kShapeMismatch: return "shape mismatch";
    case ErrorKind::kDuplicateName: return "duplicate name";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kDiverged: return "diverged";
    case ErrorKind::kConfig: return "config error";
  }
  return "unknown";
}

}  // namespace fusionrec
