#pragma once

#include <stdexcept>
#include <string>

namespace gatenorm {

// Error categories map one-to-one onto the CLI exit-code contract.
enum class ErrorKind {
    usage,         // exit 2
    input_format,  // exit 3
    contract,      // exit 4
    io,            // exit 3
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// A precondition of an operation was not met (shape mismatch, out-of-range count, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(ErrorKind::contract, what) {}
};

/// Input bytes or text could not be interpreted.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(ErrorKind::input_format, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

}  // namespace gatenorm
