#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace ditmem {

// Seeded random stream. Distributions are implemented here rather than via
// <random> distributions so draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n); n > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  void fill_normal(std::span<double> out);

  // Child stream that depends only on this stream's seed and the labels,
  // not on how many values have been drawn from it.
  Rng split(std::string_view purpose, std::uint64_t index = 0) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Per-prompt seeding rule used for multi-video evaluation runs.
constexpr std::uint64_t per_prompt_seed(std::uint64_t prompt_idx, std::uint64_t video_idx) {
  return 42 + prompt_idx * 10 + video_idx;
}

}  // namespace ditmem
