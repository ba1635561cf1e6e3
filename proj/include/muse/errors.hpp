// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module. Each error carries a category
// that the C API and the CLI translate into status/exit codes.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace muse {

enum class ErrorCategory {
    Config,     // invalid configuration or usage
    Argument,   // bad argument to an operation
    Dimension,  // shape mismatch
    Io,         // filesystem failure
    Parse,      // malformed file content
    Numeric,    // NaN/Inf or domain violation
    Oracle,     // verification oracle misuse (e.g. non-deterministic f)
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    [[nodiscard]] ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

class ArgumentError : public Error {
public:
    explicit ArgumentError(const std::string& what) : Error(ErrorCategory::Argument, what) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error(ErrorCategory::Dimension, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

class OracleError : public Error {
public:
    explicit OracleError(const std::string& what) : Error(ErrorCategory::Oracle, what) {}
};

enum class ParseFailure { BadMagic, BadHeader, VersionMismatch, Truncated };

class ParseError : public Error {
public:
    ParseError(ParseFailure failure, std::size_t offset, const std::string& what)
        : Error(ErrorCategory::Parse, what + " (at byte offset " + std::to_string(offset) + ")"),
          failure_(failure),
          offset_(offset) {}

    [[nodiscard]] ParseFailure failure() const noexcept { return failure_; }
    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

private:
    ParseFailure failure_;
    std::size_t offset_;
};

/// Process exit code for an error category: 2 config/usage, 3 I/O, 4 numeric.
inline int exit_code_for(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::Config:
        case ErrorCategory::Argument:
        case ErrorCategory::Dimension:
            return 2;
        case ErrorCategory::Io:
        case ErrorCategory::Parse:
            return 3;
        case ErrorCategory::Numeric:
        case ErrorCategory::Oracle:
            return 4;
    }
    return 1;
}

}  // namespace muse
