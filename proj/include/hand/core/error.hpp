#pragma once

#include <stdexcept>
#include <string>

namespace hand {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind {
  InvalidInput = 2,
  NumericalAbort = 3,
  VersionMismatch = 4,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

private:
  ErrorKind kind_;
};

inline Error input_error(const std::string& message) {
  return Error(ErrorKind::InvalidInput, message);
}

inline Error numeric_error(const std::string& message) {
  return Error(ErrorKind::NumericalAbort, message);
}

inline Error version_error(const std::string& message) {
  return Error(ErrorKind::VersionMismatch, message);
}

}  // namespace hand
