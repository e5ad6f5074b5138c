#pragma once

#include <stdexcept>
#include <string>

namespace qrlab {

/// Base for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor dimension / shape mismatch.
struct ShapeError : Error {
    using Error::Error;
};

/// Bad configuration: unknown keys, invalid values, missing parameter paths.
struct ConfigError : Error {
    using Error::Error;
};

/// Violated operation contract or precondition.
struct ContractError : Error {
    using Error::Error;
};

/// Unsupported file format version.
struct SchemaError : Error {
    using Error::Error;
};

/// Training produced a non-finite loss.
struct DivergenceError : Error {
    using Error::Error;
};

} // namespace qrlab
