// ============================================================================
// parallel.hpp -- static-partition parallel loops
//
// Work items are split into contiguous chunks. Kernels only write to
// disjoint outputs per item, so results do not depend on the thread count.
// ============================================================================
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace ulidar {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{[] {
    if (const char* env = std::getenv("SPAD_THREADS")) {
      try {
        const int v = std::stoi(env);
        if (v > 0) return v;
      } catch (...) {
      }
    }
    return 1;
  }()};
  return n;
}
}  // namespace detail

/// Number of worker threads used by parallel kernels (SPAD_THREADS default).
inline int thread_count() { return detail::thread_setting().load(); }
inline void set_thread_count(int n) {
  detail::thread_setting().store(std::max(1, n));
}

/// Calls fn(i) for i in [0, n).
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const auto threads = static_cast<std::size_t>(thread_count());
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace ulidar
