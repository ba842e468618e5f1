#pragma once
#include <stdexcept>
#include <string>

namespace mossnet {

// base for everything thrown by the library
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// shape/rank mismatches; message names both shapes
struct ShapeError : Error {
    using Error::Error;
};

// parameter-domain violations (nonpositive dt, nonnegative A, decay below floor, ...)
struct DomainError : Error {
    using Error::Error;
};

// config parsing/validation problems; maps to CLI exit code 1
struct ConfigError : Error {
    using Error::Error;
};

// file format / io problems
struct IoError : Error {
    using Error::Error;
};

// training diverged or another runtime check tripped
struct TrainingError : Error {
    using Error::Error;
};

} // namespace mossnet
