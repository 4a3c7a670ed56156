#pragma once

#include <stdexcept>
#include <string>

namespace hvfl {

// Common base so callers can catch anything raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes do not satisfy an operation's contract.
struct DimensionError : Error {
    using Error::Error;
};

// Division by zero, log of a non-positive value, non-finite forward result.
struct NumericDomainError : Error {
    using Error::Error;
};

// API contract broken: non-scalar loss, misaligned gradient table, ...
struct ContractError : Error {
    using Error::Error;
};

// Invalid configuration: non-integer conv output, indivisible head count,
// negative loss coefficient, infeasible synthetic spec.
struct ConfigError : Error {
    using Error::Error;
};

// Bad runtime data: non-one-hot labels, feature-width mismatch,
// out-of-range class index.
struct ValidationError : Error {
    using Error::Error;
};

// Batch-id misalignment between parties (a protocol violation).
struct AlignmentError : Error {
    using Error::Error;
};

// Out-of-order or otherwise ill-formed protocol message sequence.
struct ProtocolError : Error {
    using Error::Error;
};

// Truncated or overlong wire buffer; message carries the byte offset.
struct CodecError : Error {
    using Error::Error;
};

// Dataset ingestion failure (unknown class label, unreadable image).
struct IngestionError : Error {
    using Error::Error;
};

// The function handed to the finite-difference oracle is not deterministic.
struct OracleInvalidError : Error {
    using Error::Error;
};

// Metrics requested from an empty confusion matrix.
struct UndefinedMetricsError : Error {
    using Error::Error;
};

}  // namespace hvfl
