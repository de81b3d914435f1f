#pragma once

#include <stdexcept>
#include <string>

namespace qcnn {

// Shape disagreement between operands. The message names the offending axis.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Illegal or inconsistent configuration (bit widths, strides, method combos).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed on-disk data (IDX, CIFAR binary, checkpoints, model files).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qcnn
