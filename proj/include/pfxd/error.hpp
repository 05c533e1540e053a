#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pfxd {

enum class ErrorKind {
  EmptyInput,
  BadToken,
  NonFinite,
  BadSchedule,
  BadTimestep,
  ShapeMismatch,
  DimMismatch,
  BadConfig,
  BadMagic,
  BadVersion,
  TruncatedFile,
  Io,
  ZeroVector,
  NoValidCandidate,
  NoNGrams,
  LengthMismatch,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::BadToken: return "BadToken";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::BadSchedule: return "BadSchedule";
    case ErrorKind::BadTimestep: return "BadTimestep";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::BadVersion: return "BadVersion";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::Io: return "Io";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::NoValidCandidate: return "NoValidCandidate";
    case ErrorKind::NoNGrams: return "NoNGrams";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
  }
  return "Unknown";
}

/// Library-wide exception. Every failure carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace pfxd
