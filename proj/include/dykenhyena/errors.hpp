// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dkh {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define DKH_DEFINE_ERROR(Name)                       \
    class Name : public Error {                      \
    public:                                          \
        explicit Name(const std::string& what_arg)   \
            : Error(#Name ": " + what_arg) {}        \
    }

DKH_DEFINE_ERROR(ShapeMismatch);
DKH_DEFINE_ERROR(BadKernelSize);
DKH_DEFINE_ERROR(FilterTooLong);
DKH_DEFINE_ERROR(NotScalar);
DKH_DEFINE_ERROR(NonFinite);
DKH_DEFINE_ERROR(EmptySource);
DKH_DEFINE_ERROR(AllKeysMasked);
DKH_DEFINE_ERROR(LabelOutOfRange);
DKH_DEFINE_ERROR(TokenOutOfRange);
DKH_DEFINE_ERROR(SequenceTooLong);
DKH_DEFINE_ERROR(BadSpec);
DKH_DEFINE_ERROR(EmptyDataset);
DKH_DEFINE_ERROR(ConfigError);
DKH_DEFINE_ERROR(IoError);
DKH_DEFINE_ERROR(VersionMismatch);

#undef DKH_DEFINE_ERROR

/// Errors tied to a line of an input file carry the 1-based line number.
class LineError : public Error {
public:
    LineError(const std::string& kind, std::size_t line, const std::string& msg)
        : Error(kind + " at line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ParseError : public LineError {
public:
    ParseError(std::size_t line, const std::string& msg) : LineError("ParseError", line, msg) {}
};

class ShapeError : public LineError {
public:
    ShapeError(std::size_t line, const std::string& msg) : LineError("ShapeError", line, msg) {}
};

class LabelError : public LineError {
public:
    LabelError(std::size_t line, const std::string& msg)
        : LineError("LabelOutOfRange", line, msg) {}
};

}  // namespace dkh
