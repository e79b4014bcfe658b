#pragma once

#include <cstdint>
#include <functional>

namespace tcrlm::num {

// Global worker cap. 0 restores the hardware default. Changing the cap must
// never change numeric results; it only changes wall time.
void set_max_threads(int n);
int max_threads();

// Run fn(begin, end) over a static contiguous partition of [0, n).
// Every chunk is a pure function of (n, grain, worker count at call time),
// and each index is visited by exactly one worker, so callers that keep
// per-index work independent are deterministic under any thread count.
// Calls with n*cost below the grain run inline on the calling thread.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace tcrlm::num
