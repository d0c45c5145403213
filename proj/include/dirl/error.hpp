#pragma once

#include <stdexcept>
#include <string>

namespace dirl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (sizes, keys, flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or out-of-range input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Softmax row with no finite entry.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Parameter sets that cannot be combined (EMA, checkpoint load).
class CheckpointError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace dirl

namespace dirl {

// Every loss term of a sample was skipped because its representations are absent.
class NoSignalError : public Error {
 public:
  using Error::Error;
};

}  // namespace dirl
