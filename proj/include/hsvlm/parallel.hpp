#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace hsvlm {

namespace detail {
inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> slot{1};
  return slot;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_count_slot().store(std::max(1, n)); }
inline int num_threads() { return detail::thread_count_slot().load(); }

/// Reads HSVLM_THREADS; returns 1 when unset or malformed.
inline int threads_from_env() {
  if (const char* v = std::getenv("HSVLM_THREADS")) {
    try {
      return std::max(1, std::stoi(v));
    } catch (...) {
    }
  }
  return 1;
}

/// Splits [0, n) into contiguous chunks. Each index is processed by exactly
/// one worker, and callers only write to outputs owned by their index, so
/// results do not depend on the worker count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(num_threads());
  constexpr std::size_t kMinWork = 1u << 15;
  if (workers <= 1 || n < 2 || n * work_per_item < kMinWork) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t used = std::min(workers, n);
  const std::size_t chunk = (n + used - 1) / used;
  std::vector<std::thread> pool;
  pool.reserve(used - 1);
  for (std::size_t w = 1; w < used; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& t : pool) t.join();
}

}  // namespace hsvlm
