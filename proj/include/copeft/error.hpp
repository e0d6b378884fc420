#pragma once

#include <stdexcept>
#include <string>

namespace copeft {

enum class ErrorCode {
  kInvalidArgument = 1,
  kShape = 2,
  kConfig = 3,
  kIo = 4,
  kFormat = 5,
  kNumeric = 6,
  kMissingParameter = 7,
};

const char* error_code_name(ErrorCode code);

// Base exception for everything thrown by the library. The C API maps the
// code onto its status enum.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCode::kShape, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::kConfig, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

// Malformed file content. `line` is 1-based for text formats, 0 when unknown.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(ErrorCode::kFormat,
              line ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace copeft
