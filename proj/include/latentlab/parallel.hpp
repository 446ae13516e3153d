#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace latentlab {

// Worker-thread cap: LATENTLAB_THREADS if set, else hardware concurrency.
inline int max_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("LATENTLAB_THREADS")) {
            const int n = std::atoi(env);
            if (n >= 1) return n;
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return cached;
}

// Static-sliced parallel loop. Each index is processed exactly once and the
// body must only write state owned by its own index, so results are
// identical for every thread count.
template <class F>
void parallel_for(int n, F&& body) {
    const int threads = std::min(max_threads(), n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        const int lo = static_cast<int>(static_cast<long long>(n) * t / threads);
        const int hi = static_cast<int>(static_cast<long long>(n) * (t + 1) / threads);
        pool.emplace_back([lo, hi, &body] {
            for (int i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace latentlab
