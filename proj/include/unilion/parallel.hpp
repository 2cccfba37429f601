#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace unilion {

// Worker count: hardware concurrency, capped by UNILION_THREADS when set.
inline unsigned thread_budget() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("UNILION_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    } catch (...) {
    }
  }
  return n;
}

// Runs fn(i) for i in [0, count). Each index is visited exactly once and the
// caller guarantees that distinct indices touch disjoint outputs, so results
// do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const unsigned workers = std::min<std::size_t>(thread_budget(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace unilion
