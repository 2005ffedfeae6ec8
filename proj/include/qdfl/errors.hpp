#pragma once

#include <stdexcept>
#include <string>

namespace qdfl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel arithmetic do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Element access outside a tensor's dims.
class IndexError : public Error {
public:
    using Error::Error;
};

class AllocationError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (bad magic, truncated data, version mismatch).
class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Missing or unusable input data (manifests, images, descriptors).
class DataError : public Error {
public:
    using Error::Error;
};

/// An evaluation protocol precondition is violated (e.g. missing camera ids).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or gradient during optimisation.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t step)
        : Error(what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// A layer was driven out of order, e.g. backward before forward.
class StateError : public Error {
public:
    using Error::Error;
};

}  // namespace qdfl
