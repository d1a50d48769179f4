#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace mfgen::rng {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream key from a root seed and a path of integer tags.
inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t key = splitmix64(seed);
    for (auto tag : tags) key = splitmix64(key ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
    return key;
}

/// Uniform double in (0, 1) addressed by (key, counter).
inline double counter_uniform(std::uint64_t key, std::uint64_t counter) noexcept {
    const std::uint64_t bits = splitmix64(key ^ splitmix64(counter));
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal draw addressed by (key, counter); results do not depend on call order,
/// so particle simulations are independent of how work is partitioned.
inline double counter_normal(std::uint64_t key, std::uint64_t counter) noexcept {
    const double u1 = counter_uniform(key, 2 * counter);
    const double u2 = counter_uniform(key, 2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace mfgen::rng
