#pragma once

#include <stdexcept>
#include <string>

namespace epg {

// Bad flags, malformed configs, unknown keys. CLI exit code 2.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses or states. CLI exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace epg
