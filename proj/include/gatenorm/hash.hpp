#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include <fmt/core.h>

namespace gatenorm {

/// Incremental 64-bit FNV-1a. Used for content fingerprints, not security.
class Fnv1a64 {
public:
    void update(std::span<const std::byte> bytes) {
        for (const std::byte b : bytes) {
            state_ ^= static_cast<std::uint64_t>(b);
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(std::as_bytes(std::span<const char>(s.data(), s.size()))); }
    template <typename T>
    void update_values(std::span<const T> values) {
        update(std::as_bytes(values));
    }

    std::uint64_t digest() const { return state_; }
    std::string hex() const { return fmt::format("fnv1a64:{:016x}", state_); }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace gatenorm
