// Minimal fork-join helpers. Work is split into contiguous index ranges so
// results land at fixed positions regardless of the thread count.

#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace ember {

/// Default worker count: EMBER_JOBS if set to a positive integer, else the
/// hardware concurrency (at least 1).
unsigned default_jobs() noexcept;

/// Calls fn(begin, end, chunk_index) over `jobs` contiguous chunks of [0, n).
/// The first exception thrown by any chunk is rethrown after all join.
template <typename Fn>
void parallel_chunks(std::size_t n, unsigned jobs, Fn&& fn) {
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(jobs, n));
    if (workers <= 1) {
        if (n > 0) fn(std::size_t{0}, n, std::size_t{0});
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    const std::size_t base = n / workers;
    const std::size_t extra = n % workers;
    std::size_t begin = 0;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t end = begin + base + (w < extra ? 1 : 0);
        threads.emplace_back([&, begin, end, w] {
            try {
                fn(begin, end, w);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
        begin = end;
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn&& fn) {
    parallel_chunks(n, jobs, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) fn(i);
    });
}

}  // namespace ember
