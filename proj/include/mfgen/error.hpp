#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mfgen {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or missing configuration key.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Operand shapes do not compose (dimension or output-size mismatch).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Requested feature is not available for the given input (activation, target kind, graph primitive).
class UnsupportedError : public Error {
public:
    using Error::Error;
};

class UnsupportedActivationError : public UnsupportedError {
public:
    using UnsupportedError::UnsupportedError;
};

class UnsupportedGraphError : public UnsupportedError {
public:
    using UnsupportedError::UnsupportedError;
};

/// A simulated trajectory produced a non-finite state.
class DivergedError : public Error {
public:
    DivergedError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// The supremum defining a Hamiltonian is infinite.
class IllPosedHamiltonianError : public Error {
public:
    using Error::Error;
};

/// Grid too coarse for the requested PDE solve (negative densities appeared).
class GridResolutionError : public Error {
public:
    using Error::Error;
};

} // namespace mfgen
