#pragma once

#include <stdexcept>
#include <string>

namespace weedvg {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class InvalidCostError : public Error {
 public:
  using Error::Error;
};

class InvalidGroundTruthError : public Error {
 public:
  using Error::Error;
};

class OracleSizeError : public Error {
 public:
  using Error::Error;
};

class EmptyTextError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Raised when a training loss turns non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace weedvg
