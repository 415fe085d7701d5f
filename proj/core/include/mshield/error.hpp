#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mshield {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk artifact. `offset()` is the byte position where decoding
/// stopped making sense.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// The attack surface cannot provide what the attack requires (e.g. gradients).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage needs an artifact that is missing or was built under a
/// different configuration.
class DependencyError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mshield
