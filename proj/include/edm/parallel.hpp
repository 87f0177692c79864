#pragma once

#include <cstddef>
#include <functional>

namespace edm {

/// Process-wide worker cap used by parallel_for. 0 means hardware concurrency.
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs body(i) for i in [0, n). Work is split into contiguous chunks; results must be
/// written to per-index slots so the outcome does not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace edm
