#pragma once

#include <functional>

namespace mechshift {

/// Worker threads for prompt-level parallel loops. Read from MECHSHIFT_WORKERS
/// (default 1); results never depend on it.
int worker_count();

/// Runs fn(i) for i in [0, n). Each index must write only its own output slot.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace mechshift
