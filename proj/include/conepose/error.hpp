#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace conepose {

enum class Errc {
  InvalidArgument,
  NonPositiveDepth,
  DegenerateConfiguration,
  ParallelRays,
  InsufficientPoints,
  SingularSystem,
  NonPositiveOutput,
  ShapeMismatch,
  EmptyDataset,
  DivergedLoss,
  DegenerateKeypoints,
  BehindCamera,
  NoConsensus,
  InfeasibleFrustum,
  TooSmall,
  OutOfFrame,
  CollapsedBox,
  CorruptFile,
  VersionMismatch,
  BehindRightCamera,
  OutOfRightFrame,
  InsufficientPairs,
  EmptyScene,
  ConfigError,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::NonPositiveDepth: return "NonPositiveDepth";
    case Errc::DegenerateConfiguration: return "DegenerateConfiguration";
    case Errc::ParallelRays: return "ParallelRays";
    case Errc::InsufficientPoints: return "InsufficientPoints";
    case Errc::SingularSystem: return "SingularSystem";
    case Errc::NonPositiveOutput: return "NonPositiveOutput";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::DegenerateKeypoints: return "DegenerateKeypoints";
    case Errc::BehindCamera: return "BehindCamera";
    case Errc::NoConsensus: return "NoConsensus";
    case Errc::InfeasibleFrustum: return "InfeasibleFrustum";
    case Errc::TooSmall: return "TooSmall";
    case Errc::OutOfFrame: return "OutOfFrame";
    case Errc::CollapsedBox: return "CollapsedBox";
    case Errc::CorruptFile: return "CorruptFile";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::BehindRightCamera: return "BehindRightCamera";
    case Errc::OutOfRightFrame: return "OutOfRightFrame";
    case Errc::InsufficientPairs: return "InsufficientPairs";
    case Errc::EmptyScene: return "EmptyScene";
    case Errc::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure in the library is reported through this exception; `code()`
/// is the machine-readable reason.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace conepose
