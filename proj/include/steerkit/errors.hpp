#pragma once

#include <stdexcept>
#include <string>

namespace steerkit {

// Base for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor container / model file problems.
struct FormatError : Error {
    using Error::Error;
};
struct MissingTensorError : Error {
    using Error::Error;
};
struct ShapeMismatchError : Error {
    using Error::Error;
};
struct UnsupportedDtypeError : Error {
    using Error::Error;
};

// Engine runtime.
struct ContextOverflowError : Error {
    using Error::Error;
};
struct NonFiniteActivationError : Error {
    using Error::Error;
};

// Text <-> token conversion.
struct TokenizeError : Error {
    using Error::Error;
};

// PCA on an all-equal difference set and similar dead ends.
struct DegenerateInputError : Error {
    using Error::Error;
};

// Caller broke a documented precondition.
struct InvalidArgumentError : Error {
    using Error::Error;
};

} // namespace steerkit
