#pragma once

#include <stdexcept>
#include <string>

namespace emef {

// Shape/precondition violations on tensor or image operations.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed files, missing inputs, inconsistent datasets.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced by a validation op, or a diverged computation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace emef
