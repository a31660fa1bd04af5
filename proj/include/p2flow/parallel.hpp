#pragma once

// Replica-level parallel map. Each index is computed independently and the
// results come back in index order, so any reduction done afterwards is
// independent of the thread count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <optional>
#include <thread>
#include <type_traits>
#include <vector>

namespace p2flow {

inline std::size_t default_thread_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

template <class F>
auto parallel_map(std::size_t count, F&& fn, std::size_t threads = 0)
    -> std::vector<std::invoke_result_t<F&, std::size_t>> {
  using R = std::invoke_result_t<F&, std::size_t>;
  if (threads == 0) threads = default_thread_count();
  threads = std::min(threads, count);
  std::vector<std::optional<R>> slots(count);
  std::vector<std::exception_ptr> errors(count);

  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) slots[i].emplace(fn(i));
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          slots[i].emplace(fn(i));
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    pool.clear();
    // Lowest failing index wins so the reported error is reproducible.
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<R> out;
  out.reserve(count);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

}  // namespace p2flow
