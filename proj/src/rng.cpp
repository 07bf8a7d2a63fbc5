#include "adabldm/rng.hpp"

#include <cmath>
#include <numbers>

namespace adabldm {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// 53-bit uniform in [0,1); independent of the standard library's distributions
// so streams replay identically across toolchains.
double unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(base ^ h) + index);
}

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

double normal(Rng& rng) {
  // Box-Muller, one value per call.
  double u1 = unit(rng);
  while (u1 <= 0.0) u1 = unit(rng);
  const double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  const auto span = static_cast<std::uint64_t>(hi_inclusive - lo) + 1;
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t r = rng();
  while (r >= limit) r = rng();
  return lo + static_cast<int>(r % span);
}

Tensor randn(const std::vector<int>& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.values()) v = normal(rng);
  return t;
}

}  // namespace adabldm
