#pragma once

#include <stdexcept>
#include <string>

namespace ipnet {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad arguments, invalid configuration, shape mismatches. CLI exit code 1.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or inconsistent input data (files, streams). CLI exit code 2.
struct DataError : Error {
  using Error::Error;
};

// Numerical failure: divergence, NaN, singular systems. CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace ipnet
