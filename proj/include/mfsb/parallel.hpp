#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace mfsb {

/// Worker count: a positive request wins, then MFSB_THREADS, then 1.
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MFSB_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index writes its own slot, so the
/// results do not depend on the schedule. The first exception (lowest index) is rethrown.
template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  const int w = std::max(1, std::min(threads, n));
  if (w == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto work = [&]() {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < w; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mfsb
