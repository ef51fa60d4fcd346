#pragma once

#include <stdexcept>
#include <string>

namespace podom {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidPoseError : public Error {
 public:
  using Error::Error;
};

class DegenerateAngleError : public Error {
 public:
  using Error::Error;
};

class InvalidStatsError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, was truncated, or had malformed content.
class IoError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IcpError : public Error {
 public:
  using Error::Error;
};

class MetricsError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// A subcommand ran before the artifacts it consumes were produced.
class PipelineError : public Error {
 public:
  using Error::Error;
};

}  // namespace podom
