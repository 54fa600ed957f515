#pragma once

#include <stdexcept>
#include <string>

namespace ditmem {

// Bad or inconsistent data: shape mismatches, stale fingerprints, corrupt files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or numerical breakdown.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ditmem
