#pragma once

#include <stdexcept>
#include <string>

namespace sambay {

// Base of every error raised by the library. The CLI maps the concrete type
// onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent tensor shapes passed to an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, argument or precondition.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a computation, or a numerical procedure that failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable file, malformed on-disk format.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sambay
