#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace adfp {

// Thrown for malformed run configurations (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown for unreadable/corrupt files and failed pipeline stages (exit code 3).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic, build-independent RNG (splitmix64 core, Box-Muller normals).
// derive() gives an independent stream keyed off the *original* seed, so
// per-sample streams do not depend on how many values were drawn elsewhere.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();                        // N(0, 1)
  uint64_t uniform_int(uint64_t n);       // [0, n), n >= 1
  Rng derive(uint64_t stream) const;

  template <class RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    const auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
      const uint64_t j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  uint64_t seed_;
  uint64_t state_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// Worker cap: ADFP_THREADS env var, falling back to hardware concurrency.
int thread_count();
void set_thread_count(int n);  // 0 restores the default

// Runs fn(begin, end) over [0, n) split into fixed chunks of `grain`.
// Chunk boundaries depend only on (n, grain), never on the worker count, so
// any chunk-indexed reduction stays deterministic. Chunks must not share
// writable state.
void parallel_for(int64_t n, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& fn);

std::string format_shape(const std::vector<int64_t>& shape);

}  // namespace adfp
