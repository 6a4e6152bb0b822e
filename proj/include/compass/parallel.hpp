#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace compass {

// Process-wide cap on worker threads (the CLI's --threads). Work is split
// into index ranges and every result is written to its own slot, so the
// output never depends on the thread count.
void set_num_threads(int n);
int num_threads();

// Calls fn(i) for i in [0, n). The first exception thrown by any worker is
// rethrown on the calling thread after all workers joined.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

template <class T, class F>
std::vector<T> parallel_map(std::size_t n, F&& fn) {
    std::vector<T> out(n);
    parallel_for(n, [&](std::size_t i) { out[i] = fn(i); });
    return out;
}

}  // namespace compass
