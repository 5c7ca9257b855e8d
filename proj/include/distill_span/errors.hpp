#pragma once

#include <stdexcept>
#include <string>

namespace distill_span {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
  using Error::Error;
};

// All positions of a softmax slice were masked out.
class DegenerateMaskError : public Error {
  using Error::Error;
};

class ConfigError : public Error {
  using Error::Error;
};

// Invalid argument values (temperature, learning rate, empty batch, ...).
class ParameterError : public Error {
  using Error::Error;
};

// Input data out of range for the tables/vocabulary it indexes.
class DataError : public Error {
  using Error::Error;
};

// backward() called without a recorded forward pass.
class MissingTapeError : public Error {
  using Error::Error;
};

class UninitializedStatisticsError : public Error {
  using Error::Error;
};

class UnsupportedKernelError : public Error {
  using Error::Error;
};

// Malformed file contents (JSON, teacher logits, checkpoint header).
class FormatError : public Error {
  using Error::Error;
};

// Checkpoint payload inconsistent with its own header.
class CorruptionError : public Error {
  using Error::Error;
};

class SlicingError : public Error {
  using Error::Error;
};

class MappingError : public Error {
  using Error::Error;
};

class InvalidExampleError : public Error {
  using Error::Error;
};

// Training produced a NaN or infinite loss.
class NonFiniteLossError : public Error {
  using Error::Error;
};

}  // namespace distill_span
