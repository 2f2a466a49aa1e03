#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace chemmap {

/// Base class for every error raised by the library. Messages are meant for
/// end users of the CLI, so they name the offending quantity.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(what); }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw Error(what);
}

}  // namespace chemmap
