#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace opscope {

/// Base error for every failure the library reports.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File / format problems (bad magic, shape mismatch, truncation).
class LoadError : public Error {
public:
    using Error::Error;
};

/// Contract violations on in-memory data (invariants, preconditions).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A steering cell with no examples whose unsteered prediction differs from
/// the target. Distinct so grid drivers can record the cell as empty.
class EmptyEligibleError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// FNV-1a 64-bit over raw bytes. Used as an integrity tag in manifests,
/// not for security.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x00000100000001b3ull;
    }
    return h;
}

inline std::string fnv1a64_hex(std::string_view bytes) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(bytes);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace opscope
