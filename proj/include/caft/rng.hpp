#pragma once

// Seeded random streams with platform-independent draws.
//
// The standard distributions are implementation-defined, so uniform and
// normal draws are derived from raw 64-bit engine output here. Sub-streams
// are keyed by name so that, e.g., weight initialization does not shift when
// the data pipeline consumes a different number of draws.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace caft {

std::uint64_t splitmix64(std::uint64_t x);
/// FNV-1a over bytes.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 14695981039346656037ull);

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}
  /// Independent stream derived from `seed` and a stream name.
  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) (rejection sampling, no modulo bias).
  std::size_t below(std::size_t n);
  /// Standard normal (Box-Muller, cached pair).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  std::string serialize() const;
  void deserialize(const std::string& state);

  bool operator==(const Rng& other) const;

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace caft
