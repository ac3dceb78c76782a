#pragma once

#include <cstddef>
#include <functional>

namespace nowcast {

/// Worker count: hardware concurrency capped by NOWCAST_THREADS when set.
unsigned worker_count();

/// Runs body(i) for i in [0, n). Iterations are split into contiguous ranges,
/// one per worker; callers must write only to slots owned by i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace nowcast
