#pragma once

#include <stdexcept>
#include <string>

#include "ratekd/real.hpp"

RATEKD_BEGIN_NAMESPACE

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined by an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition or invariant was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration (architecture, training or CLI settings).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset or checkpoint file.
class FormatError : public Error {
 public:
  using Error::Error;
};

#define RATEKD_EXPECT(cond, ErrorType, msg)       \
  do {                                            \
    if (!(cond)) throw ::ratekd::ErrorType(msg);  \
  } while (false)

RATEKD_END_NAMESPACE
