#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tagllm {

// Error categories; the CLI prints them as `ERROR <code>: <message>`.
enum class ErrorCode {
  dimension,
  numeric,
  value,
  vocabulary,
  config,
  io,
  format,
  missing_artifact,
  state,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::value: return "value";
    case ErrorCode::vocabulary: return "vocabulary";
    case ErrorCode::config: return "config";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::missing_artifact: return "missing_artifact";
    case ErrorCode::state: return "state";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tagllm
