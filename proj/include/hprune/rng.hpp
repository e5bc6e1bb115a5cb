#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hprune {

// Derives an independent 64-bit seed for a named substream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  float uniform() { return std::uniform_real_distribution<float>(0.0f, 1.0f)(engine_); }
  float normal() { return std::normal_distribution<float>(0.0f, 1.0f)(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hprune
