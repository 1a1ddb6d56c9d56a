#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tent {

// Shape or rank mismatch between tensor operands.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid configuration, input data, or API usage.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Training diverged (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch(epoch), batch(batch) {}

  std::size_t epoch;
  std::size_t batch;
};

// Failure while writing output artifacts.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tent
