#pragma once

#include <stdexcept>
#include <string>

namespace fuseloc {

inline constexpr const char* kVersion = "0.1.0";

// All recoverable failures are thrown as one of the types below. Messages are
// module-qualified ("module: detail") so the CLI can print them verbatim.
class Error : public std::runtime_error {
public:
    Error(const std::string& module, const std::string& detail)
        : std::runtime_error(module + ": " + detail), module_(module) {}
    const std::string& module() const { return module_; }

private:
    std::string module_;
};

// Broken precondition or shape contract. CLI exit code 1.
class ContractError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required. CLI exit code 1.
class ValidityError : public ContractError {
public:
    using ContractError::ContractError;
};

// Malformed file contents (bad magic, truncated payload, ...). CLI exit code 1.
class FormatError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failure (missing file, unwritable directory). CLI exit code 2.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace fuseloc
