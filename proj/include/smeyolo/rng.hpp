#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string_view>

#include "tensor.hpp"

namespace sme {

/// FNV-1a, used to derive stream ids from stable names.
constexpr std::uint64_t stream_id(std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  return h;
}

/// Random stream keyed by (seed, stream). Two streams with different keys are
/// independent, so each image or parameter tensor can draw from its own stream
/// and the result never depends on the order work is scheduled in.
///
/// The distributions are written out here instead of using <random>'s, whose
/// output is implementation-defined.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }
  Rng(std::uint64_t seed, std::string_view stream) : Rng(seed, stream_id(stream)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % span);
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::int64_t>(last - first);
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(first[i], first[uniform_int(0, i)]);
  }

 private:
  std::mt19937_64 engine_;
};

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev = 1.0) {
  for (auto& v : t.values()) v = static_cast<T>(stddev * rng.normal());
}

template <typename T>
Tensor<T> random_tensor(Dims dims, std::uint64_t seed, std::string_view stream, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(dims));
  Rng rng(seed, stream);
  fill_uniform(t, rng, lo, hi);
  return t;
}

}  // namespace sme
