#pragma once

#include <stdexcept>
#include <string>

namespace xfeat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or configuration values that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward op.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed files: bad magic, truncated payloads, unknown codes.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace xfeat
