#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace geovec {

enum class Errc {
  InvalidArgument,
  RangeError,
  DegenerateBearing,
  UpstreamUnavailable,
  NoAddressFound,
  FixtureMiss,
  CacheCorrupt,
  MissingSection,
  EmptyTokenMatrix,
  ProviderUnavailable,
  DimMismatch,
  OddDimension,
  BadMagic,
  VersionMismatch,
  TruncatedFile,
  ChecksumMismatch,
  SingularSystem,
  DegenerateTarget,
  Misalignment,
  OverlapDetected,
  NodeMismatch,
  ParseError,
  DuplicateId,
  NonMonotonicTimestamps,
  MissingValue,
  OutOfBounds,
  AllNoData,
  TooShort,
  NonFiniteLoss,
  Io,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::RangeError: return "RangeError";
    case Errc::DegenerateBearing: return "DegenerateBearing";
    case Errc::UpstreamUnavailable: return "UpstreamUnavailable";
    case Errc::NoAddressFound: return "NoAddressFound";
    case Errc::FixtureMiss: return "FixtureMiss";
    case Errc::CacheCorrupt: return "CacheCorrupt";
    case Errc::MissingSection: return "MissingSection";
    case Errc::EmptyTokenMatrix: return "EmptyTokenMatrix";
    case Errc::ProviderUnavailable: return "ProviderUnavailable";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::OddDimension: return "OddDimension";
    case Errc::BadMagic: return "BadMagic";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::ChecksumMismatch: return "ChecksumMismatch";
    case Errc::SingularSystem: return "SingularSystem";
    case Errc::DegenerateTarget: return "DegenerateTarget";
    case Errc::Misalignment: return "Misalignment";
    case Errc::OverlapDetected: return "OverlapDetected";
    case Errc::NodeMismatch: return "NodeMismatch";
    case Errc::ParseError: return "ParseError";
    case Errc::DuplicateId: return "DuplicateId";
    case Errc::NonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case Errc::MissingValue: return "MissingValue";
    case Errc::OutOfBounds: return "OutOfBounds";
    case Errc::AllNoData: return "AllNoData";
    case Errc::TooShort: return "TooShort";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

// Every failure raised by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace geovec
