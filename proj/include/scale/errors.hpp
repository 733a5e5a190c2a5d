#pragma once

#include <stdexcept>
#include <string>

namespace scale {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes of operands disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An index (class label, row) falls outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UnknownTaskError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class AlreadyRegisteredError : public Error {
 public:
  using Error::Error;
};

// Stored replay logits no longer match the head they were taken from.
class MemoryConsistencyError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NoDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace scale
