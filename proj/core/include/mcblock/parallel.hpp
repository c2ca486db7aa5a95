#pragma once

#include <cstddef>
#include <functional>

namespace mcblock {

/// Thread cap from MCBLOCK_THREADS (default: hardware concurrency, min 1).
int default_threads();

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index runs
/// exactly once; callers write results into slot i so order never matters.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace mcblock
