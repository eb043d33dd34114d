#pragma once

#include <stdexcept>
#include <string>

namespace muse2he {

/// Raised when raster or tensor geometry does not satisfy an operation's contract.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad spec, unknown preset, empty dataset, mismatched manifest.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace muse2he
