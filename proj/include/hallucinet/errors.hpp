#pragma once

#include <stdexcept>
#include <string>

namespace hallucinet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when an operation produces NaN or infinity from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated tensor file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Checkpoint and manifest disagree (class count, modalities, channels).
class MismatchError : public Error {
 public:
  using Error::Error;
};

class MissingModalityError : public Error {
 public:
  using Error::Error;
};

}  // namespace hallucinet
