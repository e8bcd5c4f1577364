#pragma once

#include <stdexcept>
#include <string>

namespace mdn {

// Bad tensor geometry: mismatched inner dims, wrong rank, inconsistent state.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or missing input data (files, corpora, configs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf during training, SVD non-convergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mdn
