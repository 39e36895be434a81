#pragma once

#include <cstddef>
#include <functional>

namespace brainprog {

/// Worker count used by parallel_for; 0 means hardware concurrency.
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs body(i) for every i in [0, n). Each index is processed exactly once
/// and results must be written to index-owned slots, so the outcome does not
/// depend on the number of threads. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace brainprog
