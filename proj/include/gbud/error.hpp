#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace gbud {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree; `dimension()` names the offending extent.
class ShapeError : public Error {
 public:
  ShapeError(std::string dimension, const std::string& what)
      : Error(what), dimension_(std::move(dimension)) {}
  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

/// A NaN or infinity appeared where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration supplied by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  kIo,
  kBadMagic,
  kBadHeader,
  kVersionMismatch,
  kTruncated,
  kTrailingData,
  kBadDescriptor,
  kUnsupported,
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kIo: return "io";
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kBadHeader: return "bad header";
    case FormatErrorKind::kVersionMismatch: return "version mismatch";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kTrailingData: return "trailing data";
    case FormatErrorKind::kBadDescriptor: return "bad descriptor";
    case FormatErrorKind::kUnsupported: return "unsupported";
  }
  return "unknown";
}

/// A file could not be read or written in the expected format.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& detail)
      : Error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace gbud
