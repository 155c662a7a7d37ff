#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

namespace fstk {

// Error taxonomy, mirrored by the CLI exit codes:
//   config_error -> 2, numeric_error -> 3, io_error -> 4.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Overload for literal messages: hot paths call these thousands of times per
// second, so the passing case must not construct a std::string.
inline void check_arg(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw config_error(msg);
}

inline void check_numeric(bool cond, const std::string& msg) {
  if (!cond) throw numeric_error(msg);
}

inline void check_io(bool cond, const std::string& msg) {
  if (!cond) throw io_error(msg);
}

namespace detail {

// Large tensors are allocated and freed once per tape evaluation; with the
// default glibc thresholds each of those round trips is an mmap/munmap pair
// plus fresh page faults. Keeping big blocks on the heap free list makes the
// sampler's inner loop ~1.4x faster. Called once; idempotent.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

// FNV-1a 64-bit hash; used for stable scenario and configuration ids.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= static_cast<uint64_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace fstk
