#pragma once

#include <exception>
#include <thread>
#include <vector>

#include "fstk/common.hpp"

namespace fstk {

// Run body(shard) for shard = 0..shards-1. shards == 1 runs inline
// (sequential mode). Work is partitioned by shard index, never by thread
// scheduling, so results depend only on the shard count. The first exception
// raised by any shard is rethrown on the calling thread.
template <typename Fn>
void parallel_shards(int shards, Fn&& body) {
  check_arg(shards >= 1, "parallel_shards: shard count must be >= 1");
  if (shards == 1) {
    body(0);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<size_t>(shards));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(shards - 1));
  for (int s = 1; s < shards; ++s) {
    pool.emplace_back([&, s]() {
      try {
        body(s);
      } catch (...) {
        errors[static_cast<size_t>(s)] = std::current_exception();
      }
    });
  }
  try {
    body(0);
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace fstk
