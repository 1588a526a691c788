#pragma once

#include <stdexcept>
#include <string>

namespace fsd {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid network, sampler, schedule or synthetic-data configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed call arguments: shape mismatch, non-finite input, empty lists.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked on an object that cannot support it (e.g. empty registry).
class StateError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fsd
