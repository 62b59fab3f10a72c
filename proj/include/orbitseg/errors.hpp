#pragma once

#include <stdexcept>
#include <string>

namespace orbitseg {

// Malformed or missing container/sidecar/manifest content.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Well-formed input whose values violate an invariant (non-finite voxels, non-binary masks).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Head-VOI extraction found no foreground.
class ExtractionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class VersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigMismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace orbitseg
