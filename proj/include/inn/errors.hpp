#pragma once

#include <stdexcept>
#include <string>

namespace inn {

// Root of every error the library raises. Callers that only want to report a
// one-line diagnostic can catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API contract (backward on a non-scalar, missing gradient).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf appeared in an operation's output.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DeterminismError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class MagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncationError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Wrong magic number in a dataset file.
class FormatMagicError : public ParseError {
 public:
  using ParseError::ParseError;
};

// Paired files (images/labels) disagree on record count, or a file's size is
// inconsistent with its header.
class LengthMismatchError : public ParseError {
 public:
  using ParseError::ParseError;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace inn
