#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace blstm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of two operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the domain of the operation.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A data file could not be parsed. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Parsed data violates a dataset or checkpoint invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A configuration key or value was rejected.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced non-finite values ("model broken").
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace blstm
