#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qcaps {

/// Base of every error raised by the library. `exit_code()` is what the CLI returns.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class DataError : public Error {
 public:
  enum class Kind {
    BadMagic,
    TruncatedFile,
    DimensionMismatch,
    MissingCompanion,
    MissingMeta,
    DatasetMissing,
  };
  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }
  int exit_code() const noexcept override { return 3; }

 private:
  Kind kind_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

/// Rotor axis shorter than the epsilon floor.
class DegenerateAxis : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonUnitRotor : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonFiniteLoss : public NumericalError {
 public:
  NonFiniteLoss(const std::string& what, std::int64_t batch_index)
      : NumericalError(what), batch_index_(batch_index) {}
  std::int64_t batch_index() const noexcept { return batch_index_; }

 private:
  std::int64_t batch_index_;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class NonScalarLoss : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public ShapeMismatch {
 public:
  using ShapeMismatch::ShapeMismatch;
};

class FieldTooSmall : public ShapeMismatch {
 public:
  using ShapeMismatch::ShapeMismatch;
};

class EmptyChildren : public Error {
 public:
  using Error::Error;
};

class BadTarget : public Error {
 public:
  using Error::Error;
};

/// Checkpoint parameter names or shapes do not match the configured model.
class CheckpointMismatch : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace qcaps
