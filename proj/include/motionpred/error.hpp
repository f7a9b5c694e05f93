#pragma once

#include <stdexcept>
#include <string>

namespace motionpred {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or width mismatch between graph inputs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity produced inside a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Precondition violation on user-supplied arguments.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace motionpred
