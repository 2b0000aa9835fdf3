#pragma once

#include <stdexcept>
#include <string>

namespace vground {

// Bad shapes / dimension mismatches between arrays.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration or CLI usage.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Broken file formats, failed round-trips, missing files.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated operation contracts (non-scalar loss, missing boxes, ...).
struct ContractError : std::invalid_argument {
    explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Runtime failures during training/generation (NaN loss, infeasible placement).
struct RuntimeFailure : std::runtime_error {
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vground
