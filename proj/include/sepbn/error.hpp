#pragma once

#include <stdexcept>
#include <string>

namespace sepbn {

// Error taxonomy used across the library. The CLI maps these onto exit codes:
// ConfigError -> 2, IoError -> 3, DivergenceError -> 4, anything else -> 1.

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct ParameterError : std::runtime_error {
  explicit ParameterError(const std::string& msg) : std::runtime_error("parameter error: " + msg) {}
};

struct RoutingError : std::runtime_error {
  explicit RoutingError(const std::string& msg) : std::runtime_error("routing error: " + msg) {}
};

struct DegenerateStatsError : std::runtime_error {
  explicit DegenerateStatsError(const std::string& msg)
    : std::runtime_error("degenerate statistics: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

struct GeometryError : std::runtime_error {
  explicit GeometryError(const std::string& msg) : std::runtime_error("geometry error: " + msg) {}
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error("divergence: " + msg) {}
};

struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& msg) : std::runtime_error("metric error: " + msg) {}
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error("checkpoint error: " + msg) {}
};

}  // namespace sepbn
