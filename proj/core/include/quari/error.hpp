#pragma once

#include <stdexcept>
#include <string>

namespace quari {

enum class ErrorCategory {
  usage,      // bad flags / arguments
  dimension,  // shape mismatch
  state,      // operation called out of order
  config,     // inconsistent configuration
  format,     // malformed input file
  io,         // filesystem failure
  internal,   // invariant violated inside the library
};

inline const char* to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::dimension: return "dimension";
    case ErrorCategory::state: return "state";
    case ErrorCategory::config: return "config";
    case ErrorCategory::format: return "format";
    case ErrorCategory::io: return "io";
    case ErrorCategory::internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const { return category_; }

  // One-line machine-parseable form, e.g. "error:dimension: a.cols != b.rows".
  std::string formatted() const {
    return std::string("error:") + to_string(category_) + ": " + what();
  }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& msg) {
  throw Error(c, msg);
}

inline void require(bool cond, ErrorCategory c, const std::string& msg) {
  if (!cond) fail(c, msg);
}

}  // namespace quari
