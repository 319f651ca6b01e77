// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace modfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or feature dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value outside its allowed domain (bad label, negative lambda, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (e.g. backward() on a non-scalar node).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step, std::string term)
      : Error(what), step_(step), term_(std::move(term)) {}
  long step() const noexcept { return step_; }
  const std::string& term() const noexcept { return term_; }

 private:
  long step_;
  std::string term_;
};

/// Malformed text input. Carries the 1-based line number and field name.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& field,
             const std::string& detail)
      : Error(source + ":" + std::to_string(line) + ": field '" + field + "': " + detail),
        line_(line),
        field_(field) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

}  // namespace modfuse
