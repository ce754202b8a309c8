#pragma once

#include <cstddef>

// Process-wide heap accounting. Only available to targets that link the
// memtrack object library, which replaces the global allocation operators.

namespace gatenorm::memtrack {

/// Bytes currently allocated through operator new.
std::size_t current_bytes() noexcept;
/// High-water mark of current_bytes() since the last reset_peak().
std::size_t peak_bytes() noexcept;
/// Set the high-water mark to the current level.
void reset_peak() noexcept;

/// Peak growth above the level at construction.
class Scope {
public:
    Scope() noexcept : base_(current_bytes()) { reset_peak(); }
    std::size_t peak_growth() const noexcept {
        const std::size_t p = peak_bytes();
        return p > base_ ? p - base_ : 0;
    }

private:
    std::size_t base_;
};

}  // namespace gatenorm::memtrack
