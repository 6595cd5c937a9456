#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace deepfv {

enum class ErrorKind {
  ShapeMismatch,
  NonFinite,
  NotScalar,
  UnsupportedSecondOrderOp,
  InvalidConfig,
  EmptyBatch,
  LabelOutOfRange,
  MissingTargets,
  EmptyDataset,
  DivergenceDetected,
  EmptyBag,
  ZeroVector,
  TooFewBags,
  MOutOfRange,
  MaskMismatch,
  HeterogeneousEntries,
  Empty,
  LengthMismatch,
  NoCandidates,
  EmptyTrainSet,
  ParseError,
  DimMismatch,
  MissingFile,
  InvalidSpec,
  TooFewPatients,
  UnknownKey,
  UnknownBagId,
  IoError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::UnsupportedSecondOrderOp: return "UnsupportedSecondOrderOp";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::EmptyBatch: return "EmptyBatch";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::MissingTargets: return "MissingTargets";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::DivergenceDetected: return "DivergenceDetected";
    case ErrorKind::EmptyBag: return "EmptyBag";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::TooFewBags: return "TooFewBags";
    case ErrorKind::MOutOfRange: return "MOutOfRange";
    case ErrorKind::MaskMismatch: return "MaskMismatch";
    case ErrorKind::HeterogeneousEntries: return "HeterogeneousEntries";
    case ErrorKind::Empty: return "Empty";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NoCandidates: return "NoCandidates";
    case ErrorKind::EmptyTrainSet: return "EmptyTrainSet";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::TooFewPatients: return "TooFewPatients";
    case ErrorKind::UnknownKey: return "UnknownKey";
    case ErrorKind::UnknownBagId: return "UnknownBagId";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// All library failures are reported through this exception; `kind()` is the
/// stable discriminator, the message carries the diagnostic.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace deepfv
