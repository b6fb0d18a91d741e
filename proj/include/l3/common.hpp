#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace l3 {

enum class ErrorKind {
  Dimension,   // shape/contract mismatch between tensors or plans
  Numeric,     // NaN/Inf where finite values are required
  Index,       // out-of-range id or coordinate
  Config,      // invalid configuration value
  Format,      // corrupt or incompatible serialized file
  Invariant,   // loaded or computed data violates a documented invariant
  Infeasible,  // a valid request that cannot be satisfied (e.g. allocation budget)
  Io,          // filesystem failure
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void check(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace l3
