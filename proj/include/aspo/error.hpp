// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aspo {

enum class ErrorCode {
  shape_mismatch,
  domain_error,
  non_scalar_root,
  non_finite,
  invalid_argument,
  degenerate_group,
  unknown_variant,
  unknown_task,
  missing_reference,
  empty_response,
  out_of_range,
  io_error,
  config_error,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::domain_error: return "domain_error";
    case ErrorCode::non_scalar_root: return "non_scalar_root";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::degenerate_group: return "degenerate_group";
    case ErrorCode::unknown_variant: return "unknown_variant";
    case ErrorCode::unknown_task: return "unknown_task";
    case ErrorCode::missing_reference: return "missing_reference";
    case ErrorCode::empty_response: return "empty_response";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::config_error: return "config_error";
  }
  return "unknown";
}

/// Every recoverable failure in the library is reported through this type.
/// `code()` is stable and meant for programmatic dispatch; `what()` carries
/// a human readable diagnostic.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Configuration errors additionally name the offending field.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(ErrorCode::config_error, field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace aspo
