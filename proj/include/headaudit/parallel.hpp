#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace headaudit {

inline unsigned default_workers() {
  return std::max(1u, std::thread::hardware_concurrency());
}

// Splits [0, count) into contiguous chunks, one per worker, and calls
// body(begin, end) on each. Chunks write disjoint outputs, so results do not
// depend on the worker count. The first exception thrown by any chunk is
// rethrown on the calling thread.
template <typename Body>
void parallel_for(std::size_t count, unsigned workers, Body&& body) {
  if (count == 0) return;
  const std::size_t n_chunks =
      std::min<std::size_t>(std::max(1u, workers), count);
  if (n_chunks == 1) {
    body(std::size_t{0}, count);
    return;
  }
  std::vector<std::exception_ptr> errors(n_chunks);
  std::vector<std::thread> threads;
  threads.reserve(n_chunks);
  const std::size_t base = count / n_chunks;
  const std::size_t extra = count % n_chunks;
  std::size_t begin = 0;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const std::size_t end = begin + base + (c < extra ? 1 : 0);
    threads.emplace_back([&, c, begin, end] {
      try {
        body(begin, end);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    });
    begin = end;
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace headaudit
