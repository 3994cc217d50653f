#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace capsf {

// Base of every error raised by the library. The CLI maps the three
// subclasses onto exit codes 1, 2 and 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, shape mismatches, invalid configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Missing or malformed files, manifests, archives and images.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

}  // namespace capsf
