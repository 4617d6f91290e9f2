#pragma once

#include <stdexcept>
#include <string>

namespace nova {

/// Tensor shapes or extents that do not fit together.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An operation's documented precondition does not hold.
struct PreconditionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite value.
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FileError : std::runtime_error {
  FileError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace nova
