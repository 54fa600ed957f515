#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ditmem {

// Incremental FNV-1a 64-bit hash. Multi-byte integers are fed little-endian
// so digests are platform independent.
class Fnv64 {
 public:
  static constexpr std::uint64_t kOffset = 14695981039346656037ULL;
  static constexpr std::uint64_t kPrime = 1099511628211ULL;

  explicit Fnv64(std::uint64_t basis = kOffset) : h_(basis) {}

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view s);
  void update_u64(std::uint64_t v);
  void update_f64(double v);
  void update_f64s(std::span<const double> values);

  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_;
};

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::string hex64(std::uint64_t v);

// Streaming SHA-256 (OpenSSL EVP).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view s);
  void update_f64s(std::span<const double> values);
  std::string hex_digest();

 private:
  void* ctx_;
};

}  // namespace ditmem
