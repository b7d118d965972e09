#pragma once

#include <stdexcept>
#include <string>

namespace kdkit {

// Base class for everything thrown by kdkit.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad config file, bad registry key, bad experiment schema, bad CLI override.
// The CLI maps this family to exit code 1.
struct ConfigError : Error {
    using Error::Error;
};

// Tensor/model shape violations.
struct ShapeError : Error {
    using Error::Error;
};

// Checkpoint and CSV read/write failures.
struct IoError : Error {
    using Error::Error;
};

// Failures while running an experiment (non-finite loss, missing grads, ...).
// The CLI maps this family to exit code 2.
struct TrainError : Error {
    using Error::Error;
};

}  // namespace kdkit
