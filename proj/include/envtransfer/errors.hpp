#pragma once

#include <stdexcept>
#include <string>

namespace envtransfer {

/// Filesystem or decode failures (missing file, bad WAV header, unwritable directory).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error("I/O error: " + what) {}
};

/// A precondition on an argument was violated.
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what)
      : std::invalid_argument("invalid input: " + what) {}
};

/// Incompatible checkpoints, schedules or configuration files.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error("config error: " + what) {}
};

}  // namespace envtransfer
