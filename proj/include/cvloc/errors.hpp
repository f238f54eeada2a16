#pragma once

#include <stdexcept>
#include <string>

namespace cvloc {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or sizes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar argument outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A precondition on call order or object state was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cvloc
