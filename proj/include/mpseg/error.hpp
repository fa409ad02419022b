#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mpseg {

enum class ErrorCode {
  MissingB0,
  ShapeMismatch,
  DegenerateDesign,
  InvalidSeries,
  UnknownMode,
  NonPositiveSpacing,
  SizeMismatch,
  MissingChannel,
  CorruptFile,
  EmptyMask,
  InvalidVariant,
  ChannelMismatch,
  IndivisibleShape,
  InvalidAlphaBeta,
  Divergence,
  InvalidOverlap,
  GridMismatch,
  EmptyGroundTruth,
  UnknownChannel,
  TumorOutOfBounds,
  ConfigInvalid,
  MissingInput,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingB0: return "MissingB0";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DegenerateDesign: return "DegenerateDesign";
    case ErrorCode::InvalidSeries: return "InvalidSeries";
    case ErrorCode::UnknownMode: return "UnknownMode";
    case ErrorCode::NonPositiveSpacing: return "NonPositiveSpacing";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::MissingChannel: return "MissingChannel";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::InvalidVariant: return "InvalidVariant";
    case ErrorCode::ChannelMismatch: return "ChannelMismatch";
    case ErrorCode::IndivisibleShape: return "IndivisibleShape";
    case ErrorCode::InvalidAlphaBeta: return "InvalidAlphaBeta";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::InvalidOverlap: return "InvalidOverlap";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::EmptyGroundTruth: return "EmptyGroundTruth";
    case ErrorCode::UnknownChannel: return "UnknownChannel";
    case ErrorCode::TumorOutOfBounds: return "TumorOutOfBounds";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::MissingInput: return "MissingInput";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can emit a machine-readable error record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace mpseg
