#pragma once

#include <stdexcept>
#include <string>

namespace ssmr {

// Base for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an op's rank/shape rules.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller (bad config, bad
// argument, out-of-range index). The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A numeric computation produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssmr
