#pragma once

#include <stdexcept>
#include <string>

namespace dvat {

// Base of every error the library throws. The CLI maps subclasses onto exit codes:
// configuration problems exit with 2, protocol and data problems with 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters, shapes, or layer chains.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad call-time input such as an out-of-range label or wrong channel count.
class InputError : public Error {
 public:
  using Error::Error;
};

// Experiment protocol violations (eval set not filtered through a target, etc.).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Broken invariants that indicate a bug inside the library.
class InternalError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class AttackError : public Error {
 public:
  using Error::Error;
};

class AutogradError : public Error {
 public:
  using Error::Error;
};

// Malformed files. `kind` lets callers and tests tell the failure modes apart.
class FormatError : public Error {
 public:
  enum class Kind {
    kBadMagic,
    kVersionMismatch,
    kTruncated,
    kCrcMismatch,
    kShapeMismatch,
    kNameMismatch,
    kCountMismatch,
    kMalformed,
    kIo,
  };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dvat
