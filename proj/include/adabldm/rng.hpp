#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "adabldm/tensor.hpp"

namespace adabldm {

/// All randomness in the library flows through a caller-owned engine of this type.
using Rng = std::mt19937_64;

/// Expands a top-level seed into an independent named substream seed.
/// Stable across platforms: FNV-1a over the name mixed with splitmix64.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng);
int uniform_int(Rng& rng, int lo, int hi_inclusive);

/// Tensor of i.i.d. standard normal draws.
Tensor randn(const std::vector<int>& shape, Rng& rng);

}  // namespace adabldm
