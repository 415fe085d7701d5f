#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mshield {

using Rng = std::mt19937_64;

/// Seed of a named substream. Every random decision in the project derives
/// from one global seed through a (stream, index) pair, e.g.
/// ("attack/fgsm", example_id), so results do not depend on execution order.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t base, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(base, stream, index));
}

}  // namespace mshield
