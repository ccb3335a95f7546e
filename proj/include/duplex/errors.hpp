#pragma once

#include <stdexcept>
#include <string>

namespace duplex {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Transcript syntax error; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(int line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// Invalid configuration value or config-file syntax.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Structured reply does not match the expected schema.
class SchemaError : public Error {
 public:
  enum class Code { MalformedJson, MissingField, WrongType, OutOfRange };

  SchemaError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

/// Remote service unreachable after exhausting retries.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Remote service replied with something other than the expected text.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Preference-pair construction failed for one flagged turn.
class BuildError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value encountered during optimization; carries the step index.
class NumericError : public Error {
 public:
  NumericError(int step, const std::string& what)
      : Error("step " + std::to_string(step) + ": " + what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

}  // namespace duplex
