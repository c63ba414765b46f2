#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <vector>

namespace tmerge::memory {

namespace detail {
inline std::atomic<std::size_t>& current() {
    static std::atomic<std::size_t> v{0};
    return v;
}
inline std::atomic<std::size_t>& peak() {
    static std::atomic<std::size_t> v{0};
    return v;
}
}  // namespace detail

inline void add(std::size_t bytes) {
    std::size_t now = detail::current().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = detail::peak().load(std::memory_order_relaxed);
    while (prev < now &&
           !detail::peak().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

inline void sub(std::size_t bytes) {
    detail::current().fetch_sub(bytes, std::memory_order_relaxed);
}

inline std::size_t current_bytes() { return detail::current().load(std::memory_order_relaxed); }
inline std::size_t peak_bytes() { return detail::peak().load(std::memory_order_relaxed); }

inline void reset_peak() {
    detail::peak().store(current_bytes(), std::memory_order_relaxed);
}

}  // namespace tmerge::memory

namespace tmerge {

// Allocator that reports every tensor buffer to the byte counters above.
// The counters are how the streaming-memory contract is checked: the peak
// during a merge stays below (n_experts + 2) x largest-tensor-bytes.
template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) {}

    T* allocate(std::size_t n) {
        memory::add(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept {
        memory::sub(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const {
        return true;
    }
};

using TensorBuffer = std::vector<float, TrackingAllocator<float>>;

}  // namespace tmerge
