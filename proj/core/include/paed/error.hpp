#ifndef PAED_ERROR_HPP
#define PAED_ERROR_HPP

#include <stdexcept>
#include <string>

namespace paed {

// Root of the library's exception hierarchy. The CLI maps categories to
// exit codes: ConfigError -> 2, missing-input IoError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};
struct InvalidConfig : ConfigError {
  using ConfigError::ConfigError;
};

struct IoError : Error {
  using Error::Error;
};
struct MissingInput : IoError {
  using IoError::IoError;
};
struct CorruptFile : IoError {
  using IoError::IoError;
};
struct VersionMismatch : IoError {
  using IoError::IoError;
};

struct DataError : Error {
  using Error::Error;
};
struct ParseError : DataError {
  using DataError::DataError;
};
struct UnknownLabel : DataError {
  using DataError::DataError;
};
struct UnsupportedFormat : DataError {
  using DataError::DataError;
};
struct TooShort : DataError {
  using DataError::DataError;
};
struct EmptyCorpus : DataError {
  using DataError::DataError;
};
struct EmptyDataset : DataError {
  using DataError::DataError;
};
struct EmptyBatch : DataError {
  using DataError::DataError;
};
struct EmptyValidation : DataError {
  using DataError::DataError;
};
struct NoClasses : DataError {
  using DataError::DataError;
};
struct TooFewFolds : DataError {
  using DataError::DataError;
};
struct EvenWindow : DataError {
  using DataError::DataError;
};
struct InvalidDuration : DataError {
  using DataError::DataError;
};
struct PlacementFailure : DataError {
  using DataError::DataError;
};

// Contract violations between tensors/ops.
struct ShapeMismatch : Error {
  using Error::Error;
};
struct NotScalar : Error {
  using Error::Error;
};
struct MissingGradient : Error {
  using Error::Error;
};
struct NoRunningStats : Error {
  using Error::Error;
};

// NaN/Inf guard tripped during training or inference.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace paed

#endif  // PAED_ERROR_HPP
