// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fsq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (wrong rank, non-scalar output...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Raised when a second derivative is requested through an op whose
/// backward pass is not itself recorded on the tape.
class UnsupportedOpError : public Error {
 public:
  using Error::Error;
};

/// Loss or meta-loss became NaN/Inf.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data on disk or in memory.
class DataError : public Error {
 public:
  using Error::Error;
};

class LayoutError : public DataError {
 public:
  using DataError::DataError;
};

/// Cue geometry produced an empty region (hand detected off-frame).
class OffFrameError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fsq
