#pragma once

#include <stdexcept>
#include <string>

namespace qeft {

enum class ErrorKind {
    invalid_config,
    invalid_argument,
    shape_mismatch,
    out_of_range,
    io,
    bad_magic,
    unsupported_version,
    truncated,
    checksum_mismatch,
    format,
    checkpoint_mismatch,
    not_descendant,
    numeric,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) {
        fail(kind, what);
    }
}

} // namespace qeft
