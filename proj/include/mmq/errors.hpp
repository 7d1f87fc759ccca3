#pragma once

#include <stdexcept>
#include <string>

namespace mmq {

// Error families map onto the CLI exit codes: config 2, io 3, numeric 4,
// corruption 5. Shape/contract violations use std::invalid_argument.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mmq
