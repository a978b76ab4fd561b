#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace caps {

// Thrown for bad user input: malformed files, out-of-range config values,
// shape mismatches at API boundaries. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a computation fails at runtime (non-finite loss, I/O error
// mid-run). Maps to CLI exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr double kPi = 3.14159265358979323846;

}  // namespace caps
