#include "mcblock/random.hpp"

#include <cmath>
#include <numbers>

namespace mcblock {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
}

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t CounterRng::next_u64() noexcept {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

CounterRng CounterRng::split(std::uint64_t stream) const noexcept {
  return CounterRng(mix64(key_ ^ mix64(stream + kGolden)));
}

double CounterRng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t CounterRng::uniform_int(std::uint64_t n) noexcept {
  const unsigned __int128 prod = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(prod >> 64);
}

double CounterRng::normal() noexcept {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace mcblock
