#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mrfmap {

inline unsigned default_thread_count() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Runs fn(worker, begin, end) over [0, n) in chunks of `grain`, on up to `threads` workers.
/// Chunks are claimed dynamically, so fn must not depend on which worker runs a chunk for its result.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t grain, unsigned threads, Fn&& fn) {
  if (n == 0) return;
  grain = std::max<std::size_t>(1, grain);
  const std::size_t chunks = (n + grain - 1) / grain;
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), chunks));
  if (workers == 1) {
    fn(0u, std::size_t{0}, n);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto run = [&](unsigned w) {
    for (std::size_t c = next.fetch_add(1); c < chunks; c = next.fetch_add(1)) {
      fn(w, c * grain, std::min(n, (c + 1) * grain));
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
}

}  // namespace mrfmap
