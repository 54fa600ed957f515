#include "ditmem/hashing.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace ditmem {

namespace {

void put_le64(unsigned char* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

}  // namespace

void Fnv64::update(std::span<const unsigned char> bytes) {
  for (auto b : bytes) {
    h_ ^= b;
    h_ *= kPrime;
  }
}

void Fnv64::update(std::string_view s) {
  update(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

void Fnv64::update_u64(std::uint64_t v) {
  unsigned char buf[8];
  put_le64(buf, v);
  update(buf);
}

void Fnv64::update_f64(double v) { update_u64(std::bit_cast<std::uint64_t>(v)); }

void Fnv64::update_f64s(std::span<const double> values) {
  for (double v : values) update_f64(v);
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  Fnv64 h;
  h.update(bytes);
  return h.digest();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 init failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(std::span<const unsigned char> bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
}

void Sha256::update(std::string_view s) {
  update(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

void Sha256::update_f64s(std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    put_le64(buf.data() + 8 * i, std::bit_cast<std::uint64_t>(values[i]));
  }
  update(buf);
}

std::string Sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len);
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", md[i]);
    out += buf;
  }
  return out;
}

}  // namespace ditmem
