// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace bilora {

/// Base of every error raised by the library. `error_class()` is the
/// machine-parseable tag the CLI prints on failure.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* error_class() const noexcept { return "Error"; }
};

/// Shape mismatch or violated precondition.
class ContractViolation : public Error {
public:
    using Error::Error;
    const char* error_class() const noexcept override { return "ContractViolation"; }
};

/// Bad or inconsistent configuration (unknown keys, missing adapters, ...).
class ConfigError : public Error {
public:
    using Error::Error;
    const char* error_class() const noexcept override { return "ConfigError"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* error_class() const noexcept override { return "IoError"; }
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
    const char* error_class() const noexcept override { return "DivergenceError"; }
};

} // namespace bilora
