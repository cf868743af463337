#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace refsr {

enum class ErrorCode {
    NotFound,
    UnsupportedFormat,
    Truncated,
    MalformedHeader,
    Unwritable,
    DimensionMismatch,
    InvalidArgument,
    DegenerateHomography,
    MissingCheckpoint,
    MissingOutput,
    EmptySplit,
    CorruptFile,
};

std::string_view to_string(ErrorCode code) noexcept;

// All library failures are reported through this type; callers that need
// to branch on the failure kind inspect code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

}  // namespace refsr
