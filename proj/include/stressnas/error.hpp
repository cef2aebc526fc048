#pragma once

#include <stdexcept>
#include <string>

namespace stressnas {

// Error categories map one-to-one onto CLI exit codes.
enum class ExitCode : int { ok = 0, config = 1, data = 2, numerical = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stressnas
