#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace qclnet {

namespace detail {
inline std::atomic<int>& thread_override() {
  static std::atomic<int> n{-1};
  return n;
}
}  // namespace detail

/// Overrides QCLNET_THREADS for this process; pass -1 to restore the env value.
inline void set_num_threads(int n) { detail::thread_override() = n; }

/// Kernel thread cap. QCLNET_THREADS=0 (or unset) means hardware concurrency.
inline int num_threads() {
  int n = detail::thread_override();
  if (n < 0) {
    n = 0;
    if (const char* env = std::getenv("QCLNET_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (...) {
        n = 0;
      }
    }
  }
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return n;
}

/// Calls fn(i) for i in [0, n). Every index is handled by exactly one thread, so
/// results are independent of the thread count as long as fn(i) writes only to
/// memory owned by index i.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_work_per_index = 1) {
  std::size_t threads = static_cast<std::size_t>(num_threads());
  // Spawning threads for tiny loops costs more than it saves.
  if (n * min_work_per_index < (1u << 15)) threads = 1;
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  auto run = [&fn, n, chunk](std::size_t t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  };
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(run, t);
  run(0);
  for (auto& th : pool) th.join();
}

}  // namespace qclnet
