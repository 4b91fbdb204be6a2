#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace tbench {

// Bad user-supplied configuration (unknown tap name, invalid range, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A loss spec that cannot be differentiated.
struct UnsupportedLossError : std::runtime_error {
    explicit UnsupportedLossError(const std::string& msg) : std::runtime_error(msg) {}
};

// Refinement requested on an architecture that cannot support it.
struct UnsupportedArchitectureError : std::runtime_error {
    explicit UnsupportedArchitectureError(const std::string& msg) : std::runtime_error(msg) {}
};

// An attack run that had to stop (NaN gradient, degenerate direction, ...).
struct AttackError : std::runtime_error {
    explicit AttackError(const std::string& msg, int iteration = -1)
        : std::runtime_error(msg), iteration(iteration) {}
    int iteration;
};

// Training did not reach its configured floor; carries the accuracy curve.
struct TrainingError : std::runtime_error {
    TrainingError(const std::string& msg, std::vector<float> curve)
        : std::runtime_error(msg), accuracy_curve(std::move(curve)) {}
    std::vector<float> accuracy_curve;
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tbench
