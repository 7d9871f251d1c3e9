#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cbscore {

/// Base of every exception thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Anything that went wrong talking to a model backend.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// Connection refused, timeout, non-2xx reply.
class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// The server answered but the payload breaks the wire contract.
class ProtocolError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// A table backend was asked something its fixture does not cover.
class UnmodeledQueryError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// Numerical routine failed (SVD non-convergence, non-finite output).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbscore
