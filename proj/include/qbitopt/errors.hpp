#pragma once

#include <stdexcept>
#include <string>

namespace qbitopt {

// Error taxonomy. CLI maps ConfigError/FormatError/ContractError/ShapeError/IoError
// to exit code 1 and NumericError/ConstraintError to exit code 2.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shape disagrees with what an operation requires.
struct ShapeError : Error {
    using Error::Error;
};

/// A documented precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

/// Non-finite values or failure of an iterative method to converge.
struct NumericError : Error {
    using Error::Error;
};

/// Resource constraint is infeasible or a solver guard tripped.
struct ConstraintError : Error {
    using Error::Error;
};

/// Bad configuration file; message carries the offending key path.
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed input file; message carries the byte offset where parsing failed.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace qbitopt
