#pragma once

#include <stdexcept>
#include <string>

namespace lmmfs {

/// Base class for every error raised by the library. The CLI maps each
/// subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: bad CSV, bad spec file, unknown column.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Data that cannot support the model (rank-deficient X, zero residual variance).
class DegenerateDataError : public Error {
public:
    using Error::Error;
};

/// Singular systems, failed decompositions, non-finite intermediate values.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Inconsistent family / relationship declarations.
class PedigreeError : public Error {
public:
    using Error::Error;
};

}  // namespace lmmfs
