#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sdconv {

/**
 * @brief One deterministic random stream. Uniform draws come straight from
 *        a mt19937_64 engine (standardized output sequence); normal draws use
 *        Box-Muller so the sequence does not depend on the standard library's
 *        unspecified std::normal_distribution algorithm.
 */
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(engine_() % span);
  }

  /// Standard normal via Box-Muller; second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 6.283185307179586477 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(engine_() % i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/**
 * @brief Single-source RNG: a master seed plus a stream name (and optional
 *        index, e.g. the epoch for shuffling) fully determine every draw in a
 *        run. Streams in use: "init", "shuffle", "augment", "noise", "data".
 */
class Rng {
 public:
  explicit Rng(uint64_t master_seed) : master_(master_seed) {}

  uint64_t master_seed() const { return master_; }

  RngStream stream(const std::string& name, uint64_t index = 0) const {
    uint64_t h = 1469598103934665603ull;  // FNV-1a over the stream name
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= index + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return RngStream(mix(master_ ^ h));
  }

 private:
  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer: decorrelates adjacent seeds.
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  uint64_t master_;
};

}  // namespace sdconv
