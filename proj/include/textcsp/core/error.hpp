#pragma once

#include <stdexcept>
#include <string>

namespace textcsp {

// Each error family maps onto one CLI exit code (see cli/exit_codes.hpp).

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data on disk is readable but inconsistent with its declared layout.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint/config/dataset combinations that cannot be used together.
class IncompatibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace textcsp
