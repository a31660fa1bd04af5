#pragma once

#include <stdexcept>
#include <string>

namespace p2flow {

// Process exit codes reported by the CLI. Config problems and numerical
// aborts never share a code.
enum class ErrorCode : int {
  ok = 0,
  usage = 2,
  config_parse = 3,
  unresolved_name = 4,
  invalid_horizon = 5,
  output_collision = 6,
  io = 7,
  invalid_argument = 8,
  numerical_abort = 20,
  non_convergence = 21,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Violated precondition on an argument (shape mismatch, bad size, ...).
class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorCode::invalid_argument, what) {}
};

// Non-finite value or blow-up during a numerical run.
class NumericalAbort : public Error {
 public:
  explicit NumericalAbort(const std::string& what) : Error(ErrorCode::numerical_abort, what) {}
};

class ConfigError : public Error {
 public:
  ConfigError(ErrorCode code, const std::string& what) : Error(code, what) {}
};

}  // namespace p2flow
