#pragma once

#include <stdexcept>
#include <string>

namespace diffprune {

// Bad input: shapes, ranges, configuration, missing artifacts. Maps to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite values or divergence during optimization. Maps to exit code 2.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace diffprune
