#pragma once

#include <stdexcept>
#include <string>

namespace mrfmap {

enum class ErrorKind {
  InvalidArgument,
  InvalidDepth,
  EmptyTraversal,
  UnallocatedVoxel,
  OutOfBounds,
  InsufficientData,
  DegenerateFit,
  TooLarge,
  ParseError,
  NonMonotonicTimestamps,
  DecodeError,
  DimensionMismatch,
  IoError,
  Config,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InvalidDepth: return "InvalidDepth";
    case ErrorKind::EmptyTraversal: return "EmptyTraversal";
    case ErrorKind::UnallocatedVoxel: return "UnallocatedVoxel";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::DegenerateFit: return "DegenerateFit";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::NonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case ErrorKind::DecodeError: return "DecodeError";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::Config: return "Config";
  }
  return "Unknown";
}

/// Library-wide exception carrying a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mrfmap
