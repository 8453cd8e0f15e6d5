#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace imd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated IMDT file. Carries the byte offset at which the
/// reader gave up.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SupervisionError : public Error {
 public:
  using Error::Error;
};

/// Robust estimation could not produce a model (too few or degenerate matches).
class EstimationFailure : public Error {
 public:
  using Error::Error;
};

/// A dataset record failed to load or validate. The message names the path.
class RecordError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint was written for a different model specification.
class SpecMismatch : public Error {
 public:
  SpecMismatch(const std::string& what, std::string diff) : Error(what + "\n" + diff), diff_(std::move(diff)) {}
  const std::string& diff() const noexcept { return diff_; }

 private:
  std::string diff_;
};

}  // namespace imd
