#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace virtlab {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_label(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based generator: output i is mix64(key + (i+1)*golden). Child
/// streams are derived from (key, label) only, so the values a component
/// sees never depend on how many numbers some other component consumed.
/// Satisfies UniformRandomBitGenerator for use with <random> distributions.
class Rng {
public:
  using result_type = std::uint64_t;

  constexpr explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() {
    ++counter_;
    return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  constexpr Rng split(std::uint64_t child) const {
    Rng r;
    r.key_ = mix64(key_ ^ mix64(child + 0x3c6ef372fe94f82bULL));
    return r;
  }
  constexpr Rng split(std::string_view label) const { return split(hash_label(label)); }
  constexpr Rng split(std::string_view label, std::uint64_t index) const {
    return split(label).split(index);
  }

  /// Uniform in [0, 1) with 53 random bits.
  constexpr double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  constexpr std::uint64_t key() const { return key_; }
  constexpr std::uint64_t counter() const { return counter_; }

private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace virtlab
