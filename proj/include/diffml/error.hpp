#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diffml {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  non_finite,
  parse_error,
  io_error,
  config_error,
  timeout,
};

std::string_view to_string(ErrorCode code);

// Every failure surfaced by the library carries a machine-readable code so the
// harness can classify cells (config vs runtime) without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace diffml
