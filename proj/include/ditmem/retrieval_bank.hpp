#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ditmem/latent_codec.hpp"
#include "ditmem/memory_encoder.hpp"

namespace ditmem {

inline constexpr std::size_t kDefaultEmbedDim = 256;
inline constexpr std::uint64_t kDefaultEmbedSeed = 0x5eedULL;
inline constexpr std::size_t kDefaultTopK = 5;

// Hashed bag-of-words caption embedding, unit L2 norm.
std::vector<double> embed_caption(std::string_view text, std::size_t d_embed = kDefaultEmbedDim,
                                  std::uint64_t seed = kDefaultEmbedSeed);

struct BankEntry {
  std::string id;
  std::string caption;
  std::vector<double> embedding;
  std::string latent_ref;                      // relative to the bank root
  std::optional<std::string> tokens_ref;       // relative to the bank root
  std::optional<std::string> encoder_version;  // set together with tokens_ref
  std::vector<TokenSpan> token_spans;          // layout of the cached tokens

  friend bool operator==(const BankEntry&, const BankEntry&) = default;
};

struct BankManifest {
  std::vector<BankEntry> entries;
  std::size_t d_embed = kDefaultEmbedDim;
  std::uint64_t embed_seed = kDefaultEmbedSeed;
  std::string codec_fingerprint;
  std::string created;

  friend bool operator==(const BankManifest&, const BankManifest&) = default;
};

// Manifest text with an embedded checksum over everything else.
std::string manifest_to_text(const BankManifest& m);
BankManifest manifest_from_text(const std::string& text);

struct ScoredEntry {
  std::size_t index = 0;  // position in the bank's entry list
  std::string id;
  double score = 0.0;
};

// Exact inner-product ranking: descending score, ties by ascending id.
std::vector<ScoredEntry> topk_by_embedding(const std::vector<double>& query,
                                           const std::vector<BankEntry>& entries, std::size_t k,
                                           const std::vector<std::size_t>* view = nullptr);

// On-disk bank: <root>/manifest.json plus <root>/blobs/*.dmem.
class MemoryBank {
 public:
  // `created` defaults to the current UTC time.
  static MemoryBank create(const std::filesystem::path& root, std::string codec_fingerprint,
                           std::size_t d_embed = kDefaultEmbedDim,
                           std::optional<std::string> created = std::nullopt);
  static MemoryBank open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const BankManifest& manifest() const { return manifest_; }
  const std::vector<BankEntry>& entries() const { return manifest_.entries; }
  std::size_t size() const { return manifest_.entries.size(); }
  std::optional<std::size_t> find(const std::string& id) const;

  // Writes the latent blob and records the entry. `embedding` overrides the
  // built-in caption embedding (external encoder slot).
  void add(const std::string& id, const std::string& caption, const LatentVideo& latent,
           std::optional<std::vector<double>> embedding = std::nullopt);
  void save() const;

  LatentVideo load_latent(std::size_t index) const;

  // Re-encodes every entry whose cached tokens are missing or stale; returns
  // the number of entries updated. The manifest is rewritten atomically.
  std::size_t precompute_tokens(MemoryEncoder& encoder);
  std::size_t stale_count(const MemoryEncoder& encoder) const;

  // Cached tokens when current, otherwise a fresh encode (reported via `encoded`).
  MemoryTokens tokens_for(std::size_t index, MemoryEncoder& encoder, bool* encoded = nullptr) const;

  // Inner-product top-K over all entries or over `view` (entry indices).
  std::vector<ScoredEntry> query_topk(const std::vector<double>& query, std::size_t k,
                                      const std::vector<std::size_t>* view = nullptr) const;
  std::vector<ScoredEntry> query_topk(std::string_view prompt, std::size_t k,
                                      const std::vector<std::size_t>* view = nullptr) const;

 private:
  std::filesystem::path root_;
  BankManifest manifest_;
};

// Deterministic sample without replacement of ceil(fraction * n) indices,
// returned in ascending order.
std::vector<std::size_t> subset_indices(std::size_t n, double fraction, std::uint64_t seed);
std::size_t subset_size(std::size_t n, double fraction);

}  // namespace ditmem
