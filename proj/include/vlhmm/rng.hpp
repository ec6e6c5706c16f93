#pragma once

// Seeded randomness. Everything flows from one root seed through named
// substreams, and per-event engines are derived by counter rather than by
// advancing shared generator state. A resumed run only needs the counters.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>

namespace vlhmm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class SeedStreams {
public:
  explicit SeedStreams(std::uint64_t root) : root_(root) {}

  std::uint64_t stream(std::string_view name) const {
    return splitmix64(root_ ^ fnv1a(name));
  }

  // Engine for event `counter` of the named stream.
  std::mt19937_64 engine(std::string_view name, std::uint64_t counter = 0) const {
    return std::mt19937_64(splitmix64(stream(name) + 0x632be59bd9b4e019ull * (counter + 1)));
  }

  std::uint64_t root() const { return root_; }

private:
  std::uint64_t root_;
};

// Uniform in [0,1) with 53-bit resolution. std::uniform_real_distribution is
// implementation-defined, so we draw bits directly.
inline double uniform01(std::mt19937_64& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double sample_gumbel(std::mt19937_64& eng) {
  double u = uniform01(eng);
  if (u <= 0.0) u = 0x1.0p-53;
  return -std::log(-std::log(u));
}

// Index draw from an explicit probability vector (assumed to sum to ~1).
template <typename Real>
int sample_categorical(std::span<const Real> probs, std::mt19937_64& eng) {
  const double u = uniform01(eng);
  double acc = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= Real(0)) continue;
    last = static_cast<int>(i);
    acc += static_cast<double>(probs[i]);
    if (u < acc) return last;
  }
  if (last < 0) throw std::runtime_error("sample_categorical: distribution has no mass");
  return last;
}

}  // namespace vlhmm
