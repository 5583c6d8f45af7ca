#pragma once

#include <stdexcept>
#include <string>

namespace msagcn {

// Base of every error the library throws. Subclasses map one-to-one onto the
// failure classes callers are expected to distinguish (the CLI turns them into
// exit codes).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct AxisError : Error {
  using Error::Error;
};

struct SequenceTooShortError : Error {
  using Error::Error;
};

struct EmptyBatchError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct TopologyError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct LabelError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct CorruptionError : Error {
  using Error::Error;
};

struct EmptyEvaluationError : Error {
  using Error::Error;
};

}  // namespace msagcn
