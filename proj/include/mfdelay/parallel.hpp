#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace mfdelay {

/// Worker count; 0 means "take MFDELAY_THREADS or 1".
struct ParallelOptions {
  unsigned threads = 0;

  unsigned resolved() const {
    if (threads > 0) return threads;
    if (const char* env = std::getenv("MFDELAY_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v > 0) return static_cast<unsigned>(v);
    }
    return 1;
  }
};

/// Runs body(begin, end, worker) over fixed contiguous chunks of [0, count).
/// Each index is handled by exactly one call, so writes indexed by particle
/// give results that do not depend on the thread count.
template <class Body>
void parallel_for(std::size_t count, const ParallelOptions& opts, Body&& body) {
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.resolved(), static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (workers == 1) {
    body(std::size_t{0}, count, 0u);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t b = std::min(count, w * chunk), e = std::min(count, b + chunk);
    pool.emplace_back([&, b, e, w] {
      try {
        body(b, e, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mfdelay
