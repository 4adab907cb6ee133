#ifndef NCGP_RANDOM_HPP
#define NCGP_RANDOM_HPP

#include <array>
#include <cstdint>

namespace ncgp::random {

// Philox4x32-10 (Salmon et al., Random123). Counter-based: the output block is
// a pure function of (counter, key), which makes every stream portable and
// independent of evaluation order.
using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

Counter philox4x32_10(Counter counter, Key key);

Key key_from_seed(std::uint64_t seed);

// splitmix64 finaliser; used to derive independent seeds from (seed, tag).
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

// 53-bit uniform in [0, 1) from a 64-bit word.
inline double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Standard normal keyed by (seed, a, b, c): Box-Muller on one Philox block.
double keyed_normal(std::uint64_t seed, std::uint32_t a, std::uint32_t b,
                    std::uint32_t c);

/// Sequential stream over Philox blocks. Stream `id` selects an independent
/// counter range for the same seed.
class Stream {
public:
  explicit Stream(std::uint64_t seed, std::uint64_t id = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  double uniform();           // [0, 1)
  double uniform(double lo, double hi);
  double normal();            // Box-Muller, cached pair
  std::uint64_t uniform_index(std::uint64_t n); // unbiased in [0, n)
  bool bernoulli(double p);
  std::uint64_t poisson(double rate);

private:
  void refill();

  Key key_;
  std::uint64_t id_;
  std::uint64_t block_ = 0;
  Counter buffer_{};
  int used_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

} // namespace ncgp::random

#endif
