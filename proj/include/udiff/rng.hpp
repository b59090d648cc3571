#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/random/normal_distribution.hpp>

namespace udiff {

// FNV-1a, 64-bit. Labels are hashed with this fixed function so stream keys
// do not depend on std::hash.
constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct SeedSpec {
  std::uint64_t master_seed = 0;
  std::vector<std::pair<std::string, std::int64_t>> path;

  SeedSpec child(std::string label, std::int64_t index) const {
    SeedSpec s = *this;
    s.path.emplace_back(std::move(label), index);
    return s;
  }

  std::string to_string() const {
    std::string out = std::to_string(master_seed);
    for (const auto& [label, index] : path) {
      out += '/';
      out += label;
      out += ':';
      out += std::to_string(index);
    }
    return out;
  }
};

// Two independent 64-bit keys for a spec; the path is folded in order, so
// permuted paths give different keys.
inline std::array<std::uint64_t, 2> stream_keys(const SeedSpec& spec) {
  std::uint64_t a = splitmix64(spec.master_seed ^ 0x6a09e667f3bcc908ULL);
  std::uint64_t b = splitmix64(spec.master_seed ^ 0xbb67ae8584caa73bULL);
  for (const auto& [label, index] : spec.path) {
    const std::uint64_t lh = fnv1a64(label);
    const std::uint64_t ih = splitmix64(static_cast<std::uint64_t>(index));
    a = splitmix64(a ^ lh) ^ ih;
    b = splitmix64(b + lh) ^ splitmix64(ih ^ 0x3c6ef372fe94f82bULL);
  }
  return {splitmix64(a), splitmix64(b)};
}

// Owned generator. Satisfies UniformRandomBitGenerator.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(const std::array<std::uint64_t, 2>& key) {
    std::seed_seq seq{static_cast<std::uint32_t>(key[0]), static_cast<std::uint32_t>(key[0] >> 32),
                      static_cast<std::uint32_t>(key[1]), static_cast<std::uint32_t>(key[1] >> 32)};
    engine_.seed(seq);
  }

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  // 53 random bits, exactly representable, in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() { return normal_(engine_); }

 private:
  std::mt19937_64 engine_;
  boost::random::normal_distribution<double> normal_;
};

inline RngStream derive_stream(const SeedSpec& spec) {
  if (spec.path.empty()) throw std::invalid_argument("derive_stream: empty seed path");
  return RngStream(stream_keys(spec));
}

inline double uniform(RngStream& s) { return s.uniform(); }

inline std::vector<double> gaussian_vector(RngStream& s, int d, double variance) {
  if (d < 1) throw std::invalid_argument("gaussian_vector: dimension must be >= 1");
  if (!(variance > 0.0)) throw std::invalid_argument("gaussian_vector: variance must be positive");
  const double sd = std::sqrt(variance);
  std::vector<double> v(static_cast<std::size_t>(d));
  for (double& x : v) x = sd * s.normal();
  return v;
}

}  // namespace udiff
