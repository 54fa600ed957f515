#include "ditmem/retrieval_bank.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ctime>
#include <numeric>
#include <stdexcept>

#include "ditmem/blob_io.hpp"
#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"
#include "ditmem/rng.hpp"
#include "ditmem/text.hpp"
#include "json.hpp"

namespace ditmem {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<double> embed_caption(std::string_view text, std::size_t d_embed, std::uint64_t seed) {
  if (d_embed == 0) throw std::invalid_argument("d_embed must be positive");
  const auto words = caption_words(text);
  if (words.empty()) throw DataError("caption has no words to embed");
  std::vector<double> v(d_embed, 0.0);
  for (const auto& w : words) {
    Fnv64 h;
    h.update_u64(seed);
    h.update(w);
    v[h.digest() % d_embed] += 1.0;
  }
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

namespace {

json entry_to_json(const BankEntry& e) {
  json j;
  j["id"] = e.id;
  j["caption"] = e.caption;
  j["embedding"] = e.embedding;
  j["latent_ref"] = e.latent_ref;
  if (e.tokens_ref) {
    j["tokens_ref"] = *e.tokens_ref;
    j["encoder_version"] = e.encoder_version.value_or("");
    json spans = json::array();
    for (const auto& s : e.token_spans) {
      spans.push_back({{"start", s.start}, {"length", s.length}, {"branch", branch_name(s.branch)}});
    }
    j["token_spans"] = spans;
  }
  return j;
}

BankEntry entry_from_json(const json& j) {
  BankEntry e;
  e.id = j.at("id").get<std::string>();
  e.caption = j.at("caption").get<std::string>();
  e.embedding = j.at("embedding").get<std::vector<double>>();
  e.latent_ref = j.at("latent_ref").get<std::string>();
  if (j.contains("tokens_ref")) {
    e.tokens_ref = j.at("tokens_ref").get<std::string>();
    e.encoder_version = j.at("encoder_version").get<std::string>();
    for (const auto& s : j.at("token_spans")) {
      e.token_spans.push_back({e.id, s.at("start").get<std::size_t>(),
                               s.at("length").get<std::size_t>(),
                               parse_branch(s.at("branch").get<std::string>())});
    }
  }
  return e;
}

std::string body_checksum(const json& body) {
  Fnv64 h;
  h.update(body.dump());
  return hex64(h.digest());
}

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string blob_name(const std::string& id, const char* kind) {
  std::string s;
  for (char c : id) s.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
  return "blobs/" + s + "." + kind + ".dmem";
}

}  // namespace

std::string manifest_to_text(const BankManifest& m) {
  json body;
  body["format"] = "ditmem-bank";
  body["version"] = 1;
  body["d_embed"] = m.d_embed;
  body["embed_seed"] = m.embed_seed;
  body["codec_fingerprint"] = m.codec_fingerprint;
  body["created"] = m.created;
  json entries = json::array();
  for (const auto& e : m.entries) entries.push_back(entry_to_json(e));
  body["entries"] = std::move(entries);
  const std::string sum = body_checksum(body);
  body["checksum"] = sum;
  return body.dump(1) + "\n";
}

BankManifest manifest_from_text(const std::string& text) {
  json body;
  try {
    body = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bank manifest is not valid JSON (partial write?): ") + e.what());
  }
  if (!body.is_object() || body.value("format", "") != "ditmem-bank") {
    throw DataError("not a ditmem bank manifest");
  }
  if (!body.contains("checksum")) throw DataError("bank manifest has no checksum");
  const std::string stored = body.at("checksum").get<std::string>();
  body.erase("checksum");
  if (body_checksum(body) != stored) {
    throw DataError("bank manifest checksum mismatch (partial or corrupted write)");
  }
  BankManifest m;
  m.d_embed = body.at("d_embed").get<std::size_t>();
  m.embed_seed = body.at("embed_seed").get<std::uint64_t>();
  m.codec_fingerprint = body.at("codec_fingerprint").get<std::string>();
  m.created = body.at("created").get<std::string>();
  for (const auto& e : body.at("entries")) m.entries.push_back(entry_from_json(e));
  return m;
}

MemoryBank MemoryBank::create(const fs::path& root, std::string codec_fingerprint,
                              std::size_t d_embed, std::optional<std::string> created) {
  MemoryBank b;
  b.root_ = root;
  b.manifest_.codec_fingerprint = std::move(codec_fingerprint);
  b.manifest_.d_embed = d_embed;
  b.manifest_.created = created ? *created : timestamp_now();
  fs::create_directories(root / "blobs");
  return b;
}

MemoryBank MemoryBank::open(const fs::path& root) {
  const fs::path m = root / "manifest.json";
  if (!fs::exists(m)) throw DataError("no bank manifest at " + m.string());
  MemoryBank b;
  b.root_ = root;
  b.manifest_ = manifest_from_text(read_text(m));
  return b;
}

std::optional<std::size_t> MemoryBank::find(const std::string& id) const {
  for (std::size_t i = 0; i < manifest_.entries.size(); ++i) {
    if (manifest_.entries[i].id == id) return i;
  }
  return std::nullopt;
}

void MemoryBank::add(const std::string& id, const std::string& caption, const LatentVideo& latent,
                     std::optional<std::vector<double>> embedding) {
  if (find(id)) throw DataError("duplicate bank entry id '" + id + "'");
  if (latent.codec_fingerprint != manifest_.codec_fingerprint) {
    throw DataError("latent for '" + id + "' comes from codec " + latent.codec_fingerprint +
                    ", bank uses " + manifest_.codec_fingerprint);
  }
  BankEntry e;
  e.id = id;
  e.caption = caption;
  if (embedding) {
    if (embedding->size() != manifest_.d_embed) throw DataError("external embedding has wrong width");
    double n2 = 0.0;
    for (double x : *embedding) n2 += x * x;
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw DataError("external embedding is not unit norm");
    e.embedding = std::move(*embedding);
  } else {
    e.embedding = embed_caption(caption, manifest_.d_embed, manifest_.embed_seed);
  }
  e.latent_ref = blob_name(id, "latent");
  write_blob(root_ / e.latent_ref, latent.data);
  manifest_.entries.push_back(std::move(e));
}

void MemoryBank::save() const {
  fs::create_directories(root_);
  write_text_atomic(root_ / "manifest.json", manifest_to_text(manifest_));
}

LatentVideo MemoryBank::load_latent(std::size_t index) const {
  const auto& e = manifest_.entries.at(index);
  return {read_blob(root_ / e.latent_ref), manifest_.codec_fingerprint};
}

std::size_t MemoryBank::stale_count(const MemoryEncoder& encoder) const {
  const std::string v = encoder.version();
  std::size_t n = 0;
  for (const auto& e : manifest_.entries) n += !(e.tokens_ref && e.encoder_version == v);
  return n;
}

std::size_t MemoryBank::precompute_tokens(MemoryEncoder& encoder) {
  if (encoder.codec_fingerprint() != manifest_.codec_fingerprint) {
    throw DataError("encoder expects codec " + encoder.codec_fingerprint() + ", bank holds " +
                    manifest_.codec_fingerprint);
  }
  const std::string v = encoder.version();
  std::size_t updated = 0;
  for (std::size_t i = 0; i < manifest_.entries.size(); ++i) {
    auto& e = manifest_.entries[i];
    if (e.tokens_ref && e.encoder_version == v) continue;
    const LatentVideo z = load_latent(i);
    const MemoryTokens mt = encoder.encode_reference(z, e.id);
    e.tokens_ref = blob_name(e.id, "tokens");
    write_blob(root_ / *e.tokens_ref, mt.tokens);
    e.encoder_version = mt.encoder_version;
    e.token_spans = mt.spans;
    ++updated;
  }
  if (updated > 0) save();
  return updated;
}

MemoryTokens MemoryBank::tokens_for(std::size_t index, MemoryEncoder& encoder, bool* encoded) const {
  const auto& e = manifest_.entries.at(index);
  const std::string v = encoder.version();
  if (e.tokens_ref && e.encoder_version == v) {
    if (encoded) *encoded = false;
    MemoryTokens mt;
    mt.tokens = read_blob(root_ / *e.tokens_ref);
    mt.spans = e.token_spans;
    mt.encoder_version = v;
    return mt;
  }
  if (encoded) *encoded = true;
  return encoder.encode_reference(load_latent(index), e.id);
}

std::vector<ScoredEntry> topk_by_embedding(const std::vector<double>& query,
                                           const std::vector<BankEntry>& entries, std::size_t k,
                                           const std::vector<std::size_t>* view) {
  std::vector<std::size_t> idx;
  if (view) {
    idx = *view;
  } else {
    idx.resize(entries.size());
    std::iota(idx.begin(), idx.end(), 0);
  }
  if (idx.empty()) throw DataError("bank is empty");
  if (k < 1 || k > idx.size()) {
    throw std::invalid_argument("K=" + std::to_string(k) + " outside [1, " +
                                std::to_string(idx.size()) + "]");
  }
  std::vector<ScoredEntry> scored;
  scored.reserve(idx.size());
  for (std::size_t i : idx) {
    const auto& e = entries.at(i);
    if (e.embedding.size() != query.size()) throw DataError("query embedding has wrong width");
    double s = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) s += query[j] * e.embedding[j];
    scored.push_back({i, e.id, s});
  }
  auto better = [](const ScoredEntry& a, const ScoredEntry& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    better);
  scored.resize(k);
  return scored;
}

std::vector<ScoredEntry> MemoryBank::query_topk(const std::vector<double>& query, std::size_t k,
                                                const std::vector<std::size_t>* view) const {
  return topk_by_embedding(query, manifest_.entries, k, view);
}

std::vector<ScoredEntry> MemoryBank::query_topk(std::string_view prompt, std::size_t k,
                                                const std::vector<std::size_t>* view) const {
  return query_topk(embed_caption(prompt, manifest_.d_embed, manifest_.embed_seed), k, view);
}

std::size_t subset_size(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  // Small slack keeps exact products such as 0.07 * 100 from rounding up.
  const double x = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x))));
}

std::vector<std::size_t> subset_indices(std::size_t n, double fraction, std::uint64_t seed) {
  const std::size_t m = subset_size(n, fraction);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng(seed).split("bank-subset");
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace ditmem
