#pragma once

#include <stdexcept>
#include <string>

namespace icam {

/// Base of every error raised by the library. `code()` is the stable
/// machine-readable identifier the CLI reports on stderr.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

/// Shape or argument contract violated by the caller.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message) : Error("contract_error", message) {}
};

/// Argument outside the mathematical domain of the operation.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message) : Error("domain_error", message) {}
};

class PlacementError : public Error {
 public:
  explicit PlacementError(const std::string& message) : Error("placement_error", message) {}
};

/// Statistic undefined for the input (e.g. zero variance inside a mask).
class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& message)
      : Error("degenerate_input", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io_error", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("bad_config", message) {}
};

class InsufficientDataError : public Error {
 public:
  explicit InsufficientDataError(const std::string& message)
      : Error("insufficient_data", message) {}
};

}  // namespace icam
