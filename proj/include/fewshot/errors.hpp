#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// All engine errors derive from Error so callers can catch one base type.
// The CLI maps subclasses onto process exit codes; see cli main.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/axis mismatches, non-integral conv output sizes, degenerate
// batchnorm batches, odd spatial dims fed to 2x2 pooling, etc.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Labels out of range or inconsistent with the dataset header.
class LabelError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward() on a consumed tape, non-scalar loss root,
// duplicate parameter names, empty class in a prototype computation.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed files (bad magic, truncated payload, invalid header JSON).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem problems distinct from malformed content.
class IoError : public Error {
 public:
  using Error::Error;
};

// Episode construction impossible: not enough classes or per-class images.
class SamplingError : public Error {
 public:
  using Error::Error;
};

// Synthetic generator asked for more distinct classes than the attribute
// grid supports.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Bad run configuration: unknown keys, invalid combinations, missing inputs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Checkpoint/requested-operation mismatch (e.g. classifier-based eval on a
// checkpoint trained without a classifier).
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

// Non-finite training loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace fewshot
