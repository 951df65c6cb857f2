#pragma once

#include <cstdint>
#include <string_view>

namespace constcl {

// splitmix64: tiny, well-mixed, and trivially snapshot-able. All randomness in
// the pipeline flows from one seed through keyed streams so that adding or
// removing a consumer never shifts another consumer's draws.
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  splitmix64(s);
  return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derives an independent stream key from a base seed plus tags.
inline uint64_t rng_key(uint64_t seed, std::string_view tag) {
  return mix_u64(seed, hash_str(tag));
}
inline uint64_t rng_key(uint64_t seed, std::string_view tag, uint64_t a) {
  return mix_u64(rng_key(seed, tag), a);
}
inline uint64_t rng_key(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
  return mix_u64(rng_key(seed, tag, a), b);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
};

}  // namespace constcl
