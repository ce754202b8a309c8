#include "gatenorm/memtrack.hpp"

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <new>

namespace gatenorm::memtrack {

namespace {

std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};

// Every block carries a header just below the returned pointer holding the
// raw malloc pointer and the requested size.
struct Header {
    void* raw;
    std::size_t size;
};

void note_alloc(std::size_t n) noexcept {
    const std::size_t now = g_current.fetch_add(n, std::memory_order_relaxed) + n;
    std::size_t peak = g_peak.load(std::memory_order_relaxed);
    while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
}

void* allocate(std::size_t size, std::size_t align) noexcept {
    if (align < alignof(std::max_align_t)) align = alignof(std::max_align_t);
    const std::size_t room = sizeof(Header) + align;
    void* raw = std::malloc(size + room);
    if (raw == nullptr) return nullptr;
    auto addr = reinterpret_cast<std::uintptr_t>(raw) + sizeof(Header);
    addr = (addr + align - 1) & ~(static_cast<std::uintptr_t>(align) - 1);
    auto* h = reinterpret_cast<Header*>(addr) - 1;
    h->raw = raw;
    h->size = size;
    note_alloc(size);
    return reinterpret_cast<void*>(addr);
}

void release(void* p) noexcept {
    if (p == nullptr) return;
    auto* h = static_cast<Header*>(p) - 1;
    g_current.fetch_sub(h->size, std::memory_order_relaxed);
    std::free(h->raw);
}

void* allocate_or_throw(std::size_t size, std::size_t align) {
    void* p = allocate(size == 0 ? 1 : size, align);
    if (p == nullptr) throw std::bad_alloc();
    return p;
}

}  // namespace

std::size_t current_bytes() noexcept { return g_current.load(std::memory_order_relaxed); }
std::size_t peak_bytes() noexcept { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() noexcept { g_peak.store(g_current.load(std::memory_order_relaxed), std::memory_order_relaxed); }

}  // namespace gatenorm::memtrack

using gatenorm::memtrack::allocate;
using gatenorm::memtrack::allocate_or_throw;
using gatenorm::memtrack::release;

void* operator new(std::size_t n) { return allocate_or_throw(n, 0); }
void* operator new[](std::size_t n) { return allocate_or_throw(n, 0); }
void* operator new(std::size_t n, std::align_val_t a) { return allocate_or_throw(n, static_cast<std::size_t>(a)); }
void* operator new[](std::size_t n, std::align_val_t a) { return allocate_or_throw(n, static_cast<std::size_t>(a)); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return allocate(n == 0 ? 1 : n, 0); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return allocate(n == 0 ? 1 : n, 0); }

void operator delete(void* p) noexcept { release(p); }
void operator delete[](void* p) noexcept { release(p); }
void operator delete(void* p, std::size_t) noexcept { release(p); }
void operator delete[](void* p, std::size_t) noexcept { release(p); }
void operator delete(void* p, std::align_val_t) noexcept { release(p); }
void operator delete[](void* p, std::align_val_t) noexcept { release(p); }
void operator delete(void* p, std::size_t, std::align_val_t) noexcept { release(p); }
void operator delete[](void* p, std::size_t, std::align_val_t) noexcept { release(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { release(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { release(p); }
