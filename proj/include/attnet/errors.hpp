#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace attnet {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (non-scalar loss, wrong count).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Every admissible location is inhibited or outside the dorsal window.
class ExhaustedLocationsError : public Error {
 public:
  using Error::Error;
};

// The display generator could not place a pattern without overlap.
class PlacementError : public Error {
 public:
  using Error::Error;
};

// Non-finite gradient detected during training.
class NumericError : public Error {
 public:
  NumericError(std::string block, const std::string& what)
      : Error(what), block_(std::move(block)) {}
  const std::string& block() const noexcept { return block_; }

 private:
  std::string block_;
};

// Malformed input file (checkpoint, PGM, CSV).
class FormatError : public Error {
 public:
  enum class Kind {
    bad_magic,
    bad_version,
    unsupported_variant,
    bad_dims,
    truncated,
    malformed,
  };

  FormatError(Kind kind, const std::string& what, std::size_t row = 0)
      : Error(what), kind_(kind), row_(row) {}

  Kind kind() const noexcept { return kind_; }
  // 1-based line number for text formats, 0 when not applicable.
  std::size_t row() const noexcept { return row_; }

 private:
  Kind kind_;
  std::size_t row_;
};

}  // namespace attnet
