#pragma once

#include <stdexcept>
#include <string>

namespace mindvis {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf surfaced from a forward pass or a training loop.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Binary file errors. Each failure mode is its own type so callers can tell
// a foreign file from a stale one from a short read.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class TruncatedError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A stage was asked to run before the artifact it depends on exists.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

// A frozen tensor was modified during finetuning.
class PolicyViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace mindvis
