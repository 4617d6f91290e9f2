#pragma once

// Fixed-partition parallel loops. Work is split into chunks whose boundaries
// depend only on the problem size, so results never depend on how many
// threads run them.

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace nova {

/// Worker cap: NOVA_THREADS if set, else the hardware concurrency.
inline std::size_t worker_count() {
  static const std::size_t count = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("NOVA_THREADS")) {
      try {
        long v = std::stol(env);
        if (v >= 1) return std::min<std::size_t>(hw, static_cast<std::size_t>(v));
      } catch (...) {
      }
    }
    return hw;
  }();
  return count;
}

/// Calls fn(lo, hi) over [0, n) in chunks of `grain`. Chunks must write
/// disjoint outputs.
template <class Fn>
void parallel_for(std::size_t n, std::size_t grain, Fn&& fn) {
  if (n == 0) return;
  grain = std::max<std::size_t>(grain, 1);
  const std::size_t chunks = (n + grain - 1) / grain;
  const std::size_t workers = std::min(worker_count(), chunks);
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  auto run = [&](std::size_t w) {
    for (std::size_t c = w; c < chunks; c += workers) fn(c * grain, std::min(n, (c + 1) * grain));
  };
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& t : pool) t.join();
}

/// Accumulates per-chunk partial sums of fn(lo, hi, partial) into `out`,
/// adding chunk results in chunk order.
template <class Real, class Fn>
void ordered_reduce(std::size_t n, std::vector<Real>& out, Fn&& fn, std::size_t grain = 1024) {
  if (n == 0) return;
  const std::size_t chunks = (n + grain - 1) / grain;
  if (chunks == 1) {
    std::vector<Real> acc(out.size(), Real(0));
    fn(std::size_t{0}, n, acc);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += acc[i];
    return;
  }
  std::vector<std::vector<Real>> partial(chunks, std::vector<Real>(out.size(), Real(0)));
  parallel_for(chunks, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t c = lo; c < hi; ++c) fn(c * grain, std::min(n, (c + 1) * grain), partial[c]);
  });
  for (const auto& p : partial)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
}

}  // namespace nova
