#pragma once

#include <stdexcept>
#include <string>

namespace pqr {

enum class ErrorCode {
    invalid_argument,
    numerical_failure,
    empty_mask,
    empty_match,
    io,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::numerical_failure: return "numerical_failure";
        case ErrorCode::empty_mask: return "empty_mask";
        case ErrorCode::empty_match: return "empty_match";
        case ErrorCode::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& what) : Error(ErrorCode::invalid_argument, what) {}
};

struct NumericalFailure : Error {
    explicit NumericalFailure(const std::string& what) : Error(ErrorCode::numerical_failure, what) {}
};

struct EmptyMask : Error {
    explicit EmptyMask(const std::string& what) : Error(ErrorCode::empty_mask, what) {}
};

struct EmptyMatch : Error {
    explicit EmptyMatch(const std::string& what) : Error(ErrorCode::empty_match, what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidArgument(what);
}

} // namespace pqr
