#pragma once
// Counter-based seeding: every random stream is a pure function of a base
// seed and a few counters (stream tag, epoch, sample index), so results do
// not depend on evaluation order or thread count.

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

namespace dmfa {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) {
  std::uint64_t h = splitmix64(seed);
  for (auto c : counters) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ull));
  return h;
}

template <typename... Counters>
std::mt19937_64 make_rng(std::uint64_t seed, Counters... counters) {
  return std::mt19937_64(mix_seed(seed, {static_cast<std::uint64_t>(counters)...}));
}

/// Random permutation of [0, count) for one training epoch.
inline std::vector<std::size_t> epoch_permutation(std::size_t count, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(seed, 0x5045524dull, epoch);
  // explicit Fisher-Yates: std::shuffle's exact sequence is implementation-defined
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace dmfa
