#pragma once

#include <functional>

namespace protuseg {

/// Worker count used by parallel_for. 1 runs everything on the caller thread.
void set_num_threads(int n);
int num_threads();

/// Runs fn(0..n-1). Each index must write only to its own outputs; results are
/// then independent of the worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace protuseg
