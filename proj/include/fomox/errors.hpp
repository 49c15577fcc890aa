#pragma once

#include <stdexcept>
#include <string>

namespace fomox {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix shapes. Message names both shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid parameter value (empty interval, probability out of range, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// API misuse: backward on a non-scalar, missing gradient, reused graph.
class ContractError : public Error {
public:
    using Error::Error;
};

// Rejection-sampling budget exhausted; signals a degenerate hypothesis.
class SimulatorError : public Error {
public:
    using Error::Error;
};

// Checkpoint/head file cannot be read (bad magic, truncation, shape mismatch).
class LoadError : public Error {
public:
    using Error::Error;
};

// Metric has no defined value on the given inputs (single class, constant input).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

// Input exceeds a fixed model capacity (feature count above pad width).
class CapacityError : public Error {
public:
    using Error::Error;
};

// A dataset cannot be split into context and test sets (too few inliers or
// a missing class).
class SplitError : public Error {
public:
    using Error::Error;
};

// Malformed CSV or JSON input. Message carries row/column context.
class ParseError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite value. Message carries seed context.
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace fomox
