#pragma once

#include <stdexcept>
#include <string>

namespace avd {

// Single exception type for precondition and IO failures across the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void require(bool condition, const char* message)
{
    if (!condition)
        throw Error(message);
}

inline void require(bool condition, const std::string& message)
{
    if (!condition)
        throw Error(message);
}

} // namespace detail
} // namespace avd
