#pragma once

#include <cstdint>
#include <random>

namespace ginv {

/// splitmix64 finalizer.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent seed for a numbered stream of a base seed.
///
/// Every random consumer in the toolkit gets its own (base, stream) pair, so
/// results do not depend on the order in which workers draw numbers.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(splitmix64(base) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t base, std::uint64_t stream) { return Rng(derive_seed(base, stream)); }

/// Stream numbers used across the toolkit.
namespace stream {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t batch = 2;
inline constexpr std::uint64_t training = 3;
inline constexpr std::uint64_t gallery = 4;
inline constexpr std::uint64_t dataset = 5;
/// Candidate g initializes from seed_init + g and draws update noise from seed_noise + g.
inline constexpr std::uint64_t seed_init = 1000;
inline constexpr std::uint64_t seed_noise = 2000;
}  // namespace stream

}  // namespace ginv
