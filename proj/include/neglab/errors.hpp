#pragma once

#include <stdexcept>
#include <string>

namespace neglab {

// Error taxonomy mirrors the CLI exit codes: config -> 2, data -> 3, network -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

struct ShapeError : DataError {
    explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

struct NumericError : DataError {
    explicit NumericError(const std::string& msg) : DataError(msg) {}
};

struct NetworkError : Error {
    explicit NetworkError(const std::string& msg) : Error(msg) {}
};

}  // namespace neglab
