#pragma once

#include <stdexcept>
#include <string>

namespace dsan {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised when a caller breaks an operation's precondition (bad shape, bad
// configuration, out-of-range argument).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace dsan
