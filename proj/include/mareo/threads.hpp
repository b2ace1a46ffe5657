#pragma once

// Deterministic fork/join helper.  Work is assigned to workers by a static
// rule chosen by the caller (typically index mod W), so results never depend
// on scheduling.  Reductions must be performed by the caller in worker order.

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mareo {

inline int default_workers() {
    const unsigned hw = std::thread::hardware_concurrency();
    const unsigned w = hw == 0 ? 1 : (hw > 8 ? 8 : hw);
    return static_cast<int>(w);
}

// Runs fn(w) for w in [0, workers); blocks until all finish.  The first
// exception thrown by any worker is rethrown on the calling thread.
inline void parallel_run(int workers, const std::function<void(int)>& fn) {
    if (workers <= 1) {
        fn(0);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers) - 1);
    std::exception_ptr err;
    std::mutex err_mu;
    auto guarded = [&](int w) {
        try {
            fn(w);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
        }
    };
    for (int w = 1; w < workers; ++w) threads.emplace_back(guarded, w);
    guarded(0);
    for (auto& t : threads) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace mareo
