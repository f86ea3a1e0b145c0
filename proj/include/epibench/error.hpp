#pragma once

#include <stdexcept>
#include <string>

namespace epibench {

/// Malformed or inconsistent input (files, configuration, arguments to an operation).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical or orchestration failure while computing a result from valid input.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void fail_validation(const std::string& msg) { throw ValidationError(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw ValidationError(msg);
    }
}

} // namespace detail
} // namespace epibench
