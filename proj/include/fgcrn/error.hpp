#pragma once

#include <stdexcept>
#include <string>

namespace fgcrn {

// Every failure raised by the library derives from Error. The subclasses map
// onto the CLI exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class ShapeError : public DataError {
public:
    using DataError::DataError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

// Call-order violations: stale traces, missing fitted state.
class StateError : public Error {
public:
    using Error::Error;
};

}  // namespace fgcrn
