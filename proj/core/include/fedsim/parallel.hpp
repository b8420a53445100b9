#pragma once

#include <cstddef>
#include <functional>

namespace fedsim {

// Runs fn(i) for i in [0, count) on up to `workers` threads. Each index is an
// independent unit of work writing only to its own output slot, so the result
// is identical for any worker count. Exceptions from workers are rethrown on
// the calling thread.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace fedsim
