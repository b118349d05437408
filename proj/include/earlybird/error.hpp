#pragma once

#include <stdexcept>
#include <string>

namespace earlybird {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or vector lengths do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A documented precondition of an operation was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

/// A reduction mask selects no position on some row.
class InvalidMaskError : public Error {
public:
    using Error::Error;
};

/// A token id is outside the vocabulary.
class VocabularyError : public Error {
public:
    using Error::Error;
};

/// Malformed or insufficient input data (empty corpus, bad dataset line, ...).
class InputError : public Error {
public:
    using Error::Error;
};

/// A checkpoint file could not be read back.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Experiment configuration is invalid.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A report cannot be produced from the results store.
class ReportError : public Error {
public:
    using Error::Error;
};

} // namespace earlybird
