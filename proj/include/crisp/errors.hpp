// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace crisp {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand extents do not satisfy an operation's shape rule.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A primitive produced NaN or Inf, or training diverged.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Autodiff graph misuse (e.g. backward through a detached value).
struct GraphError : Error {
    explicit GraphError(const std::string& msg) : Error(msg) {}
};

}  // namespace crisp
