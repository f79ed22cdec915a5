// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kvsvd {

enum class ErrorKind {
    contract,        // precondition violated by the caller
    numerical,       // an iterative routine failed to converge
    undefined_input, // mathematically undefined for the given input
    io,
    format,          // well-formed file of the wrong kind or schema
    checksum,        // blob corruption or length mismatch
    missing_tensor,
    validation,      // container contents disagree with each other
    infeasible,      // requested target cannot be reached
    inapplicable,    // allocator preconditions do not hold for the input
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Raised when the SVD sweep limit is exhausted; carries the largest
/// remaining relative off-diagonal coupling.
class NumericalError : public Error {
public:
    NumericalError(const std::string& message, double residual)
        : Error(ErrorKind::numerical, message), residual_(residual) {}

    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class MissingTensorError : public Error {
public:
    explicit MissingTensorError(std::string name)
        : Error(ErrorKind::missing_tensor, "missing tensor: " + name), name_(std::move(name)) {}

    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

/// Raised by the d_min solver when even d_min = 1 keeps more than the target.
class InfeasibleTargetError : public Error {
public:
    InfeasibleTargetError(const std::string& message, double floor_ratio)
        : Error(ErrorKind::infeasible, message), floor_ratio_(floor_ratio) {}

    double floor_ratio() const noexcept { return floor_ratio_; }

private:
    double floor_ratio_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw Error(ErrorKind::contract, message);
    }
}

} // namespace kvsvd
