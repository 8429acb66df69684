// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace covt {

/// Worker cap: COVT_THREADS when set and positive, else hardware concurrency.
std::size_t worker_count();

/// Calls fn(i) for every i in [0, n), statically partitioned into contiguous
/// chunks. Each index is handled by exactly one worker, so results that are
/// written per index do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace covt
