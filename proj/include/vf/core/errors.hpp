#pragma once

#include <stdexcept>
#include <string>

namespace vf {

// Exit codes used by the CLI map onto these.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingDependencyError : std::runtime_error {
    MissingDependencyError(const std::string& stage, const std::string& detail)
        : std::runtime_error("missing dependency: stage '" + stage + "' has not produced " + detail),
          stage_name(stage) {}
    std::string stage_name;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace vf
