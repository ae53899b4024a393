#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace actfocus {

// Base for every failure raised by the library. Malformed model output is
// never an error; it is carried as data (see Response::well_formed).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateGroupError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, std::uint64_t seed)
      : Error(what + " (seed " + std::to_string(seed) + ")"), seed_(seed) {}
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::string param)
      : Error(what + " in parameter '" + param + "'"), param_(std::move(param)) {}
  const std::string& parameter() const noexcept { return param_; }

 private:
  std::string param_;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

class EmptyBatchError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace actfocus
