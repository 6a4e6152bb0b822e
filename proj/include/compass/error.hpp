#pragma once

#include <stdexcept>
#include <string>

namespace compass {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto its exit-code contract.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller supplied something out of contract (bad sizes, empty inputs, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

// A file could not be parsed; the message names the offending record.
class ParseError : public Error {
public:
    using Error::Error;
};

// A file was written by an incompatible format version.
class VersionMismatch : public Error {
public:
    using Error::Error;
};

// A required input file is missing or unreadable.
class MissingInput : public Error {
public:
    using Error::Error;
};

// Non-finite values or solver failure.
class NumericError : public Error {
public:
    using Error::Error;
};

// A ratio metric whose denominator vanished (faithfulness, mass fractions).
class UndefinedMetric : public Error {
public:
    using Error::Error;
};

}  // namespace compass
