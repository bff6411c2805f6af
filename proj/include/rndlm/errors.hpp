#pragma once

#include <stdexcept>
#include <string>

namespace rndlm {

// Error taxonomy mirrors the CLI exit codes: usage (1), data (2), numeric (3).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

// Shape mismatches surface the offending shapes; they come from bad inputs or
// corrupt checkpoints, so they share the data exit code.
class ShapeError : public DataError {
public:
    using DataError::DataError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace rndlm
