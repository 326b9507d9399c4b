#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vidit {

// Error kinds double as the machine-readable tag the CLI writes into its
// error record, so keep the strings stable.
enum class ErrorKind {
  kInvalidArgument,
  kIoError,
  kNotFound,
  kConfigError,
  kTrainingFailure,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorKind::kInvalidArgument, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIoError, what) {}
};

class NotFound : public Error {
 public:
  explicit NotFound(const std::string& what) : Error(ErrorKind::kNotFound, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorKind::kConfigError, what) {}
};

class TrainingFailure : public Error {
 public:
  explicit TrainingFailure(const std::string& what)
      : Error(ErrorKind::kTrainingFailure, what) {}
};

}  // namespace vidit
