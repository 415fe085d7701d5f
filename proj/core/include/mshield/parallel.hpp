#pragma once

#include <cstddef>
#include <functional>

namespace mshield {

/// Worker count: MSHIELD_THREADS if set (>= 1), else hardware concurrency.
std::size_t worker_threads();

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Work items must be
/// independent; exceptions are rethrown on the calling thread.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace mshield
