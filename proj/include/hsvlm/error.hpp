#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hsvlm {

enum class ErrorCode {
  NearZeroNorm,
  IndexOutOfRange,
  ShapeMismatch,
  UnsupportedOperator,
  NonFinite,
  BadMagic,
  TruncatedPayload,
  DimensionOverflow,
  RankDeficient,
  OutOfBounds,
  EmptyClass,
  DimMismatch,
  DuplicateName,
  InvalidConfig,
  VersionMismatch,
  OverlapError,
  EmptyBatch,
  DegenerateSpec,
  PrototypeDimMismatch,
  DivergedLoss,
  LabelOutOfRange,
  EmptyEvaluation,
  PaletteTooSmall,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NearZeroNorm: return "NearZeroNorm";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::UnsupportedOperator: return "UnsupportedOperator";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::DimensionOverflow: return "DimensionOverflow";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::DuplicateName: return "DuplicateName";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::OverlapError: return "OverlapError";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::DegenerateSpec: return "DegenerateSpec";
    case ErrorCode::PrototypeDimMismatch: return "PrototypeDimMismatch";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::PaletteTooSmall: return "PaletteTooSmall";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace hsvlm
