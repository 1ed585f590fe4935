#pragma once

#include <stdexcept>
#include <string>

namespace prunelab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class SnapshotError : public Error { using Error::Error; };
class MetricError : public Error { using Error::Error; };
class SelectorError : public Error { using Error::Error; };
class DegenerateModuleError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class PlanError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
/// Checkpoint does not belong to the configured model.
class MismatchError : public Error { using Error::Error; };
/// Artifacts in one directory disagree (config hash or content digest).
class ConsistencyError : public Error { using Error::Error; };

}  // namespace prunelab
