#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ice {

enum class ErrorCode {
  ZeroVector,
  NonFinite,
  DimensionMismatch,
  EmptyInput,
  EmptyClass,
  IO,
  InvariantViolation,
  BadMagic,
  VersionUnsupported,
  ChecksumMismatch,
  InvalidSpec,
  InvalidAxis,
  InvalidConfig,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::IO: return "IO";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidAxis: return "InvalidAxis";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Every failure raised by the engine carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ice
