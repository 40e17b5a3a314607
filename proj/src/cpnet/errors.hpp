#pragma once

#include <stdexcept>
#include <string>

namespace cpnet {

/// Bad caller input: shapes, ranges, configuration. Maps to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numeric breakdown at run time (NaN loss and the like). Maps to exit code 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system failures. Messages always carry the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail_validation(const std::string& what) { throw ValidationError(what); }

inline void require(bool condition, const char* what) {
  if (!condition) fail_validation(what);
}

inline void require(bool condition, const std::string& what) {
  if (!condition) fail_validation(what);
}

}  // namespace cpnet
