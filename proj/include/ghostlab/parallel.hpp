#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ghostlab {

namespace detail {

inline std::atomic<std::size_t>& thread_limit_storage()
{
    static std::atomic<std::size_t> limit{0};
    return limit;
}

}  // namespace detail

/// Caps the number of worker threads used by the library. 0 restores the
/// default (GHOSTLAB_THREADS, else hardware concurrency). Results never depend
/// on this value.
inline void set_thread_limit(std::size_t n) { detail::thread_limit_storage() = n; }

inline std::size_t thread_limit()
{
    if (const std::size_t n = detail::thread_limit_storage().load(); n > 0) return n;
    if (const char* env = std::getenv("GHOSTLAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Calls fn(b) for every block index b in [0, blocks). Blocks are claimed
/// dynamically, so fn must write only to block-private outputs.
template <class Fn>
void parallel_blocks(std::size_t blocks, Fn&& fn)
{
    const std::size_t workers = std::min(thread_limit(), blocks);
    if (workers <= 1) {
        for (std::size_t b = 0; b < blocks; ++b) fn(b);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t b = next.fetch_add(1);
            if (b >= blocks) return;
            try {
                fn(b);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = blocks;
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

/// Fixed partition of [0, count) into blocks of `block` items, independent of
/// the thread count.
struct BlockRange {
    std::size_t count;
    std::size_t block;

    [[nodiscard]] std::size_t blocks() const noexcept { return block ? (count + block - 1) / block : 0; }
    [[nodiscard]] std::size_t begin(std::size_t b) const noexcept { return b * block; }
    [[nodiscard]] std::size_t end(std::size_t b) const noexcept { return std::min(count, (b + 1) * block); }
};

template <class Fn>
void parallel_for(std::size_t count, Fn&& fn, std::size_t block = 64)
{
    const BlockRange range{count, block};
    parallel_blocks(range.blocks(), [&](std::size_t b) {
        for (std::size_t i = range.begin(b); i < range.end(b); ++i) fn(i);
    });
}

}  // namespace ghostlab
