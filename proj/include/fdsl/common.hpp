#pragma once

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace fdsl {

struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Chaos-game orbit escaped or collapsed; callers treat the system as rejected.
struct divergent_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct search_exhausted_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct nonfinite_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct label_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string strfmt(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    char buf[1024];
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    return std::string(buf);
}

} // namespace fdsl
