#pragma once

#include <stdexcept>
#include <string>

namespace noisear {

// Rejected inputs (shape mismatches, bad config values, out-of-range tokens).
class invalid_input : public std::runtime_error {
public:
    explicit invalid_input(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or truncated files.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite losses and similar numerical breakdowns.
class numerical_error : public std::runtime_error {
public:
    explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw invalid_input(what);
}

}  // namespace noisear
