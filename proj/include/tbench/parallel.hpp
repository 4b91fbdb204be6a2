#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace tbench {

// Static index partition across `workers` threads. Each index must write
// only its own output slots; results are then identical for any worker count.
inline void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    size_t w = std::min<size_t>(workers, n);
    std::vector<std::thread> threads;
    threads.reserve(w);
    for (size_t t = 0; t < w; ++t) {
        threads.emplace_back([&, t]() {
            for (size_t i = t; i < n; i += w) fn(i);
        });
    }
    for (auto& th : threads) th.join();
}

}  // namespace tbench
