// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cllm4rec {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument values, inconsistent sizes, empty inputs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage produced nothing to work with (e.g. k-core pruning
/// removed every interaction).
class EmptyResultError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/inf where a finite value is required.
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

/// An object is used in a state that does not allow the operation
/// (e.g. an optimizer step without gradients).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A binary or text artifact does not follow its on-disk format.
class FormatError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

/// Text input that cannot be parsed; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace cllm4rec
