#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xmed {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer dimensions that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. running a backward pass without a matching forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (architecture, split, training setup).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid data values such as an out-of-range label.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A metric is not defined for the given predictions (e.g. AUC with one class).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed model file. `offset()` is the byte position where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace xmed
