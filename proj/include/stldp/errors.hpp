#pragma once

#include <stdexcept>
#include <string>

namespace stldp {

/// Malformed or inconsistent input data (bad schema, wrong version,
/// infeasible parameters for a scene).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace stldp
