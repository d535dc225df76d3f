#pragma once

#include <stdexcept>
#include <string>

namespace jpool {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents or inner dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed file; the message carries the path and, where known, the byte offset.
class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace jpool
