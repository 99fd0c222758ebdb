#pragma once

#include <stdexcept>
#include <string>

namespace nerfca {

// Error classes map onto the CLI exit codes (see tools/nerfca.cpp).

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misuse of the differentiation tape (e.g. backward from a non-scalar).
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Requested an operation a primitive does not support.
struct CapabilityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace nerfca
