#pragma once

#include <stdexcept>
#include <string>

namespace latentlab {

// Base class for everything thrown by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor extents do not line up for the requested operation.
struct DimensionError : Error {
    explicit DimensionError(const std::string& what) : Error(what) {}
};

// A caller broke a documented precondition.
struct ContractError : Error {
    explicit ContractError(const std::string& what) : Error(what) {}
};

// Malformed or truncated file.
struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error(what) {}
};

// NaN/Inf produced by a primitive (only raised when debug checks are on),
// or a training/optimization loop diverged.
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(what) {}
};

// Input is technically well-formed but carries no usable signal
// (e.g. an all-black image fed to the attribute extractor).
struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& what) : Error(what) {}
};

}  // namespace latentlab
