#pragma once

#include <stdexcept>

namespace fgseg {

// Configuration or usage problems (CLI exit code 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unreadable, malformed or inconsistent data (CLI exit code 2).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses or gradient-check breaches (CLI exit code 3).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fgseg
