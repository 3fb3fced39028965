#pragma once

#include <stdexcept>
#include <string>

namespace confu {

// Base class for every error raised by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

struct MaskError : Error {
  explicit MaskError(const std::string& msg) : Error("mask error: " + msg) {}
};

struct StateError : Error {
  explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

struct CapacityError : Error {
  explicit CapacityError(const std::string& msg) : Error("capacity error: " + msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

struct ProposalError : Error {
  explicit ProposalError(const std::string& msg) : Error("proposal error: " + msg) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

}  // namespace confu
