#pragma once

#include <stdexcept>
#include <string>

namespace cupre {

// Bad caller input (CLI maps this to exit code 2).
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Unreadable or malformed data on disk (exit code 3).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A checkpoint that fails its content hash, or a truncated file.
struct CorruptionError : DataError {
    using DataError::DataError;
};

// Checkpoint format version the reader does not understand.
struct VersionError : DataError {
    using DataError::DataError;
};

// Missing prerequisite artifact, e.g. a later phase run before an
// earlier one produced its checkpoint (exit code 4).
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cupre
