#pragma once

#include <stdexcept>
#include <string>

namespace cellstn {

// Tensor shapes that do not conform to an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed input files (annotation CSV, config, checkpoints, images).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cellstn
