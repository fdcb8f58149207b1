#pragma once

#include <cstddef>
#include <functional>

namespace cropdoc {

/// Resolves a requested thread count: 0 means hardware concurrency.
std::size_t resolve_threads(std::size_t requested);

/// Calls body(begin, end) over contiguous chunks of [0, n) on up to `threads`
/// threads. Chunk boundaries depend only on n and the thread count. The first
/// exception thrown by any chunk is rethrown after all threads join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& body);

/// Keeps freed heap blocks mapped so the large per-batch activations are
/// recycled instead of being returned to the OS after every step. No-op
/// outside glibc.
void tune_allocator();

}  // namespace cropdoc
