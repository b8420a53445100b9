#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace fedsim {

// Deterministic xoshiro256++ generator with hand-rolled distributions.
// Standard-library distributions are implementation-defined, so everything
// that feeds simulation results goes through this class instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent stream keyed by (seed, purpose, a, b). Streams derived from
  // the same key are identical; distinct keys are statistically independent.
  // This is what makes results independent of thread scheduling: every unit
  // of work derives its own stream from stable identifiers.
  static Rng stream(std::uint64_t seed, std::string_view purpose,
                    std::uint64_t a = 0, std::uint64_t b = 0);

  std::uint64_t next_u64();

  // Uniform on [0,1), 53-bit resolution.
  double uniform();

  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller (no cached spare; call order is the state).
  double normal();

  // Gamma(alpha, 1) via Marsaglia-Tsang; alpha > 0.
  double gamma(double alpha);

  // Dirichlet draw proportional to Gamma(alpha_i).
  std::vector<double> dirichlet(std::span<const double> alpha);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::array<std::uint64_t, 4> state_{};
};

// FNV-1a, used for stream keys and for stable content digests.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t fnv1a_u64(std::uint64_t value, std::uint64_t h);

}  // namespace fedsim
