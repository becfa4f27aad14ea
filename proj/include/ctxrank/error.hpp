#pragma once

#include <stdexcept>
#include <string>

namespace ctxrank {

/// Bad command-line usage or an invalid configuration value.
class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Input data that cannot be parsed or violates a data-model invariant.
class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values or divergence during numeric work.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace ctxrank
