#pragma once

#include <stdexcept>
#include <string>

namespace emofuse {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced or consumed somewhere it must not be.
class NumericError : public Error {
public:
    using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent input data (files, label maps, schemas).
class DataError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace emofuse
