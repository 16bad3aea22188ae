#pragma once

#include <stdexcept>
#include <string>

namespace flowvi {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Operand shapes do not satisfy an op's contract.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// A computation produced (or was handed) a non-finite value.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(what) {}
};

// An API was used outside its contract (e.g. backward on a non-scalar).
struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(what) {}
};

// The requested operation is not supported by this object (e.g. inverting
// a flow family with no tractable inverse).
struct CapabilityError : Error {
  explicit CapabilityError(const std::string& what) : Error(what) {}
};

// Bad user input: config files, CLI arguments, corpus files.
struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error(what) {}
};

}  // namespace flowvi
