// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic randomness helpers. Every consumer derives its own stream
// from (seed, channel, indices) so reordering one phase of the training
// loop cannot silently shift the draws of another. Raw std:: distribution
// objects are avoided because their output is implementation-defined; the
// helpers below are fully specified by mt19937_64 itself.

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace selfref {

// Stream labels; values are part of the reproducibility contract.
enum class RngChannel : std::uint32_t {
  PolicyInit = 1,
  Batch = 2,
  Rollout = 3,
  Permutation = 4,
  SelfEval = 5,
  DataGen = 6,
  Eval = 7,
};

inline std::mt19937_64 make_rng(std::uint64_t seed, RngChannel channel,
                                std::uint64_t a = 0, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(channel),
                    static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

// Uniform double in [0, 1) built from the top 53 bits of one draw.
inline double rand_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n). Modulo bias is below n / 2^64 and irrelevant
// at the scales used here; in exchange the result is platform-stable.
inline std::size_t rand_below(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(n));
}

// Standard normal via Box-Muller on rand_unit draws (two draws per value).
inline double rand_normal(std::mt19937_64& rng) {
  double u1 = rand_unit(rng);
  while (u1 <= 0.0) u1 = rand_unit(rng);
  const double u2 = rand_unit(rng);
  const double r = std::sqrt(-2.0 * std::log(u1));
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return r * std::cos(kTwoPi * u2);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rand_below(rng, i)]);
  }
}

inline std::vector<int> random_permutation(int n, std::mt19937_64& rng) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_in_place(perm, rng);
  return perm;
}

// Draws `count` indices from [0, pool_size). Sampling is without
// replacement while the pool is large enough, with replacement otherwise.
inline std::vector<std::size_t> sample_indices(std::size_t pool_size,
                                               std::size_t count,
                                               std::mt19937_64& rng) {
  std::vector<std::size_t> out;
  out.reserve(count);
  if (pool_size == 0 || count == 0) return out;
  if (count <= pool_size) {
    std::vector<std::size_t> ids(pool_size);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + rand_below(rng, pool_size - i);
      std::swap(ids[i], ids[j]);
      out.push_back(ids[i]);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      out.push_back(rand_below(rng, pool_size));
    }
  }
  return out;
}

}  // namespace selfref
