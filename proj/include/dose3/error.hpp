#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dose3 {

enum class ErrorKind {
  InvalidSkew,
  InvalidRotation,
  NearAntipodal,
  DegenerateMatrix,
  InvalidSchedule,
  NumericalUnderflow,
  ShapeError,
  ConfigError,
  NoGraph,
  BadMagic,
  VersionMismatch,
  ChecksumError,
  ArchMismatch,
  DivergenceError,
  EmptyInput,
  InsufficientData,
  DegenerateFit,
  ParseError,
  OrderError,
  TooShort,
  IoError,
};

constexpr std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidSkew: return "InvalidSkew";
    case ErrorKind::InvalidRotation: return "InvalidRotation";
    case ErrorKind::NearAntipodal: return "NearAntipodal";
    case ErrorKind::DegenerateMatrix: return "DegenerateMatrix";
    case ErrorKind::InvalidSchedule: return "InvalidSchedule";
    case ErrorKind::NumericalUnderflow: return "NumericalUnderflow";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::NoGraph: return "NoGraph";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::ChecksumError: return "ChecksumError";
    case ErrorKind::ArchMismatch: return "ArchMismatch";
    case ErrorKind::DivergenceError: return "DivergenceError";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::DegenerateFit: return "DegenerateFit";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::OrderError: return "OrderError";
    case ErrorKind::TooShort: return "TooShort";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers (and the CLI
/// log) can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  /// Errors tied to a line of an input file; `line` is 1-based.
  Error(ErrorKind kind, const std::string& what, std::size_t line)
      : std::runtime_error(std::string(to_string(kind)) + ": line " + std::to_string(line) + ": " + what),
        kind_(kind),
        line_(line) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::size_t line() const noexcept { return line_; }

 private:
  ErrorKind kind_;
  std::size_t line_ = 0;
};

}  // namespace dose3
