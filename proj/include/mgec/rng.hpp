#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace mgec {

// splitmix64. The entire generator state is a single 64-bit word, which is
// what the checkpoint format stores verbatim.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n). n must be positive.
  int uniform_int(int n) {
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  /// Fisher-Yates shuffle, in place.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// First k entries of a random permutation of {0,...,n-1}; sampling
  /// without replacement.
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    shuffle(idx);
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  /// Derive an independent stream id for (seed, tag, salt). Used so that e.g.
  /// the fine-tuning stage consumes the same random stream no matter which
  /// strategy invoked it.
  static uint64_t stream(uint64_t seed, std::string_view tag, uint64_t salt = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    uint64_t z = seed ^ (h + 0x9e3779b97f4a7c15ull * (salt + 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

}  // namespace mgec
