#ifndef NCGP_ERRORS_HPP
#define NCGP_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ncgp {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (mismatched sizes, bad indices).
struct ContractViolation : Error {
  using Error::Error;
};

// Data handed in is unusable (non-finite values, out-of-domain labels).
struct InputError : Error {
  using Error::Error;
};

struct NotPositiveDefinite : Error {
  NotPositiveDefinite(std::ptrdiff_t dimension_, const std::string &what)
      : Error(what), dimension(dimension_) {}
  // order of the leading minor that failed (1-based)
  std::ptrdiff_t dimension;
};

struct Breakdown : Error {
  Breakdown(std::ptrdiff_t iteration_, const std::string &what)
      : Error(what), iteration(iteration_) {}
  std::ptrdiff_t iteration;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct VersionMismatch : Error {
  using Error::Error;
};

inline void require(bool condition, const std::string &message) {
  if (!condition) {
    throw ContractViolation(message);
  }
}

} // namespace ncgp

#endif
