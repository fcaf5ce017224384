#pragma once

#include <stdexcept>
#include <string>

namespace regmarket {

enum class ErrorKind {
  schema,
  parse,
  empty_data,
  degenerate_range,
  insufficient_history,
  invalid_argument,
  dimension,
  numerical,
  size_guard,
  unsupported,
  config,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::schema: return "schema";
    case ErrorKind::parse: return "parse";
    case ErrorKind::empty_data: return "empty-data";
    case ErrorKind::degenerate_range: return "degenerate-range";
    case ErrorKind::insufficient_history: return "insufficient-history";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::size_guard: return "size-guard";
    case ErrorKind::unsupported: return "unsupported";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

/// Single exception type for the library; `kind()` discriminates the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace regmarket
