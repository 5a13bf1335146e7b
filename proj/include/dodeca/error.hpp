#pragma once

#include <stdexcept>
#include <string>

namespace dodeca {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto stable exit codes (2 config, 3 data, 4 numeric).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration: bad ranges, conflicting options, unknown tasks.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Anything wrong with input data: missing files, parse failures, schema
// violations, lookups of absent keys, empty corpora.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class LookupError : public DataError {
 public:
  using DataError::DataError;
};

// Shape or rank mismatch between tensor operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence, undefined means.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (empty prefix, step 0, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Artifact written by an incompatible version or for a different vocabulary.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace dodeca
