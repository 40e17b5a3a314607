#pragma once

#include <cstddef>
#include <functional>

namespace cpnet {

/// Worker cap, read once from CPNET_THREADS (default 1).
std::size_t worker_count();

/// Overrides the worker cap for the rest of the process (tests, benches).
void set_worker_count(std::size_t n);

/// Runs body(i) for i in [0, n). Iterations are handed out in contiguous
/// chunks; callers must keep iterations independent so that results do not
/// depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace cpnet
