#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nowcast {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or block extents disagree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a precondition (empty sets, bad labels, length mismatch).
class DataError : public Error {
 public:
  using Error::Error;
};

/// API misuse: backward on a non-scalar, step without gradients, oversampling a test split.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A sequence is too short for the requested frame.
class InsufficientHistoryError : public DataError {
 public:
  using DataError::DataError;
};

/// AUC requested for labels that contain a single class.
class UndefinedAucError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. Carries the byte offset at which decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int batch)
      : Error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch_(epoch), batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace nowcast
