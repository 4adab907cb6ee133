#include "ncgp/random.hpp"

#include "ncgp/errors.hpp"

#include <cmath>
#include <numbers>

namespace ncgp::random {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t &hi,
                    std::uint32_t &lo) {
  const std::uint64_t product =
      static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b);
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

inline std::uint64_t join(std::uint32_t hi, std::uint32_t lo) {
  return (static_cast<std::uint64_t>(hi) << 32) | lo;
}

} // namespace

Counter philox4x32_10(Counter ctr, Key key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

Key key_from_seed(std::uint64_t seed) {
  return {static_cast<std::uint32_t>(seed),
          static_cast<std::uint32_t>(seed >> 32)};
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(mix64(seed) ^ mix64(tag + 0x632BE59BD9B4E019ull));
}

double keyed_normal(std::uint64_t seed, std::uint32_t a, std::uint32_t b,
                    std::uint32_t c) {
  const Counter out = philox4x32_10({a, b, c, 0u}, key_from_seed(seed));
  // u1 in (0, 1] so the log is finite.
  const double u1 = 1.0 - to_unit(join(out[0], out[1]));
  const double u2 = to_unit(join(out[2], out[3]));
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

Stream::Stream(std::uint64_t seed, std::uint64_t id)
    : key_(key_from_seed(seed)), id_(id) {}

void Stream::refill() {
  buffer_ = philox4x32_10({static_cast<std::uint32_t>(block_),
                           static_cast<std::uint32_t>(block_ >> 32),
                           static_cast<std::uint32_t>(id_),
                           static_cast<std::uint32_t>(id_ >> 32)},
                          key_);
  ++block_;
  used_ = 0;
}

std::uint32_t Stream::next_u32() {
  if (used_ == 4) {
    refill();
  }
  return buffer_[used_++];
}

std::uint64_t Stream::next_u64() {
  const std::uint32_t hi = next_u32();
  const std::uint32_t lo = next_u32();
  return join(hi, lo);
}

double Stream::uniform() { return to_unit(next_u64()); }

double Stream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Stream::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_normal_ = true;
  return radius * std::cos(angle);
}

std::uint64_t Stream::uniform_index(std::uint64_t n) {
  require(n > 0, "Stream::uniform_index: empty range");
  // Rejection on the top of the range keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x = next_u64();
  while (x >= limit) {
    x = next_u64();
  }
  return x % n;
}

bool Stream::bernoulli(double p) { return uniform() < p; }

std::uint64_t Stream::poisson(double rate) {
  require(rate >= 0.0 && std::isfinite(rate), "Stream::poisson: bad rate");
  if (rate == 0.0) {
    return 0;
  }
  if (rate < 10.0) {
    // Sequential inversion.
    const double u = uniform();
    double p = std::exp(-rate);
    double cdf = p;
    std::uint64_t k = 0;
    while (u > cdf && p > 0.0) {
      ++k;
      p *= rate / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }
  // Transformed rejection with squeeze (Hormann's PTRS).
  const double slam = std::sqrt(rate);
  const double loglam = std::log(rate);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double U = uniform() - 0.5;
    const double V = uniform();
    const double us = 0.5 - std::fabs(U);
    const double k = std::floor((2.0 * a / us + b) * U + rate + 0.43);
    if (us >= 0.07 && V <= vr) {
      return static_cast<std::uint64_t>(k);
    }
    if (k < 0.0 || (us < 0.013 && V > us)) {
      continue;
    }
    if (std::log(V) + std::log(invalpha) - std::log(a / (us * us) + b) <=
        -rate + k * loglam - std::lgamma(k + 1.0)) {
      return static_cast<std::uint64_t>(k);
    }
  }
}

} // namespace ncgp::random
