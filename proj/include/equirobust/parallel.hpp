#pragma once

#include <cstddef>
#include <functional>

namespace equirobust {

/// Worker cap for parallel_for (default 1). Values below 1 are treated as 1.
void set_num_threads(int n);
int num_threads();

/// Calls fn(i) for every i in [0, n). Work items are independent, so results
/// do not depend on the worker count. The first exception thrown by any item
/// is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace equirobust
