#pragma once

#include <stdexcept>
#include <string>

namespace adaptime {

// Error classes map onto distinct CLI exit codes.
enum class ErrorKind {
  kConfig,
  kData,
  kNumeric,
  kShape,
  kRange,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace adaptime
