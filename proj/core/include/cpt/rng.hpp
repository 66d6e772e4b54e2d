// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace cpt {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream); different streams never share state.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x9e3779b9u};
    return Rng(seq);
}

/// Named stream identifiers so call sites do not collide.
namespace stream_id {
inline constexpr std::uint64_t world = 1;
inline constexpr std::uint64_t ordering = 2;
inline constexpr std::uint64_t batches = 3;
inline constexpr std::uint64_t fisher = 4;
inline constexpr std::uint64_t adapters = 5;
inline constexpr std::uint64_t scoring = 6;
inline constexpr std::uint64_t joint = 7;
}  // namespace stream_id

}  // namespace cpt
