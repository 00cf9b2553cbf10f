#pragma once

#include <stdexcept>
#include <string>

namespace lnablate {

// Shape / dimension mismatches in tensor operations.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Out-of-range token ids, targets, or block indices.
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model or run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Illegal norm-state transition (e.g. dropping a special that is not active).
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed checkpoint / corpus-cache / stats files. Message carries the
// byte offset or field where parsing failed.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Schedule file validation failures. Message carries the line number.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradients during training or probing.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem problems. Message carries the path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lnablate
