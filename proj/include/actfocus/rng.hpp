#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <string_view>

namespace actfocus {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based random stream. A stream is fully determined by its key, so
/// streams keyed by (seed, episode, turn) can be created on any thread in any
/// order and still produce the same draws.
class RngStream {
 public:
  using result_type = std::uint64_t;

  constexpr RngStream() = default;
  constexpr explicit RngStream(std::uint64_t key) : key_(mix64(key)) {}

  /// Derives a child stream; the parent is not advanced.
  constexpr RngStream derive(std::uint64_t tag) const { return RngStream(key_ ^ mix64(tag + 0x632be59bd9b4e019ULL)); }
  constexpr RngStream derive(std::string_view name) const { return derive(hash_name(name)); }
  constexpr RngStream derive(std::initializer_list<std::uint64_t> tags) const {
    RngStream s = *this;
    for (auto t : tags) s = s.derive(t);
    return s;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r;
    do {
      r = (*this)();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller.
  double normal() noexcept;

  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

template <class It>
void shuffle(It first, It last, RngStream& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

}  // namespace actfocus
