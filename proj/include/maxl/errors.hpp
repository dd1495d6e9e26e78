#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace maxl {

// Base of every typed error thrown by the library. The CLI maps subclasses
// onto exit codes (ConfigError -> 3, everything else -> 1).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// autograd
class ShapeError : public Error {
 public:
  using Error::Error;
};
class UnknownOpError : public Error {
 public:
  using Error::Error;
};
class NonScalarLossError : public Error {
 public:
  using Error::Error;
};
class DetachedLossError : public Error {
 public:
  using Error::Error;
};

// nn
class UnknownArchitectureError : public Error {
 public:
  using Error::Error;
};
class MissingGradientError : public Error {
 public:
  using Error::Error;
};

// losses
class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};
class EmptyMaskError : public Error {
 public:
  using Error::Error;
};

// hierarchy
class HierarchyError : public Error {
 public:
  using Error::Error;
};
class OutOfRangeClassError : public HierarchyError {
 public:
  using HierarchyError::HierarchyError;
};
class TooFewAuxError : public HierarchyError {
 public:
  using HierarchyError::HierarchyError;
};
class InvalidLevelPairError : public HierarchyError {
 public:
  using HierarchyError::HierarchyError;
};

// data_io
class FormatError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};
class CountMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class LabelRangeError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// training
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& what, std::size_t batch_index)
      : Error(what), batch_index_(batch_index) {}
  std::size_t batch_index() const noexcept { return batch_index_; }

 private:
  std::size_t batch_index_;
};
class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

}  // namespace maxl
