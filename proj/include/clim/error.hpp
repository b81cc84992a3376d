#pragma once

#include <stdexcept>
#include <string>

namespace clim {

/// Bad argument, shape mismatch or config problem. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class IoErrc {
  open_failed,
  write_failed,
  bad_magic,
  bad_version,
  bad_dtype,
  truncated,
  dim_overflow,
  malformed_header,
  size_mismatch,
  bad_label,
};

const char* to_string(IoErrc code);

/// File-format and filesystem failures. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  IoError(IoErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  IoErrc code() const noexcept { return code_; }

 private:
  IoErrc code_;
};

/// NaN/Inf, degenerate embeddings, stale caches. Maps to CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clim
