#pragma once

#include <stdexcept>
#include <string>

namespace planereg {

/// Base error for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad caller input: malformed files, invalid arguments, missing data.
/// The CLI maps these to exit code 2; any other Error maps to 1.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace planereg
