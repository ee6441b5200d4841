#pragma once

#include <stdexcept>
#include <string>

namespace purer {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration (unknown architecture, invalid hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied data has the wrong shape, size or content.
class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The requested operation is not defined for the zoo scenario (e.g. averaging heterogeneous nets).
class ScenarioError : public Error {
 public:
  using Error::Error;
};

class InternalError : public Error {
 public:
  using Error::Error;
};

/// Supervised pre-training could not reach the requested accuracy floor.
class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, double achieved_accuracy)
      : Error(what), achieved_accuracy_(achieved_accuracy) {}
  double achieved_accuracy() const { return achieved_accuracy_; }

 private:
  double achieved_accuracy_;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line) : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace purer
