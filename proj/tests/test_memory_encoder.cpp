#include "doctest.h"
#include "gradcheck.hpp"
#include "ditmem/errors.hpp"
#include "ditmem/memory_encoder.hpp"
#include "ditmem/rng.hpp"

using namespace ditmem;

namespace {

EncoderConfig micro() {
  EncoderConfig c;
  c.in_channels = 2;
  c.latent_dhw = {4, 8, 8};
  c.block_channels = {3, 4};
  c.tokens_per_branch = 2;
  c.d_model = 8;
  c.n_heads = 2;
  return c;
}

LatentVideo random_latent(const Shape& shape, std::uint64_t seed, const std::string& fp) {
  Rng rng(seed);
  Tensor t(shape);
  rng.fill_normal(t.data());
  return {std::move(t), fp};
}

}  // namespace

TEST_CASE("adaptive pooling ranges") {
  using R = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(adaptive_pool_ranges(2, 4) == R{{0, 1}, {0, 1}, {1, 2}, {1, 2}});
  CHECK(adaptive_pool_ranges(4, 2) == R{{0, 2}, {2, 4}});
  CHECK(adaptive_pool_ranges(5, 3) == R{{0, 2}, {1, 4}, {3, 5}});
}

TEST_CASE("branch selection") {
  EncoderConfig c;
  CHECK(c.branches() == std::vector<Branch>{Branch::kLow, Branch::kHigh});
  c.enable_lpf = false;
  CHECK(c.branches() == std::vector<Branch>{Branch::kHigh});
  c.enable_hpf = false;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.attention_mode = AttentionMode::kNone;
  CHECK(c.branches() == std::vector<Branch>{Branch::kPlain});
}

TEST_CASE("token layout and spans") {
  MemoryEncoder enc(micro(), "codec");
  const auto a = random_latent({2, 4, 8, 8}, 1, "codec");
  const auto b = random_latent({2, 4, 8, 8}, 2, "codec");
  const MemoryTokens m = enc.encode_references({{"a", &a}, {"b", &b}});
  CHECK(enc.tokens_per_video() == 4);
  CHECK(m.tokens.shape() == Shape{8, 8});
  REQUIRE(m.spans.size() == 4);
  CHECK(m.spans[0] == TokenSpan{"a", 0, 2, Branch::kLow});
  CHECK(m.spans[1] == TokenSpan{"a", 2, 2, Branch::kHigh});
  CHECK(m.spans[3] == TokenSpan{"b", 6, 2, Branch::kHigh});
  CHECK(m.encoder_version == enc.version());
  CHECK(m.tokens.all_finite());
}

TEST_CASE("inference encoding is deterministic and per-video") {
  MemoryEncoder enc(micro(), "codec");
  const auto a = random_latent({2, 4, 8, 8}, 1, "codec");
  const auto b = random_latent({2, 4, 8, 8}, 2, "codec");
  const MemoryTokens both = enc.encode_references({{"a", &a}, {"b", &b}});
  const MemoryTokens solo = enc.encode_reference(b, "b");
  CHECK(bit_identical(both.tokens.rows(4, 4), solo.tokens));
  CHECK(bit_identical(enc.encode_reference(b, "b").tokens, solo.tokens));
}

TEST_CASE("codec fingerprint mismatch is a data error") {
  MemoryEncoder enc(micro(), "codec");
  const auto a = random_latent({2, 4, 8, 8}, 1, "other");
  CHECK_THROWS_AS(enc.encode_reference(a, "a"), DataError);
}

TEST_CASE("version follows parameters and running statistics") {
  MemoryEncoder enc(micro(), "codec");
  const std::string v0 = enc.version();
  CHECK(MemoryEncoder(micro(), "codec").version() == v0);
  CHECK(MemoryEncoder(micro(), "codec2").version() != v0);
  enc.parameters().params()[0].var.mutable_value()[0] += 1e-3;
  CHECK(enc.version() != v0);
}

TEST_CASE("shared and separate attention differ in parameter count") {
  EncoderConfig shared = micro(), separate = micro(), none = micro();
  separate.attention_mode = AttentionMode::kSeparate;
  none.attention_mode = AttentionMode::kNone;
  const auto n_shared = MemoryEncoder(shared, "c").parameters().scalar_count();
  const auto n_sep = MemoryEncoder(separate, "c").parameters().scalar_count();
  const auto n_none = MemoryEncoder(none, "c").parameters().scalar_count();
  CHECK(n_none < n_shared);
  CHECK(n_shared < n_sep);
  EncoderConfig unshared = micro();
  unshared.branch_weight_sharing = false;
  CHECK(MemoryEncoder(unshared, "c").parameters().scalar_count() > n_shared);
}

TEST_CASE("archive round trip restores tokens") {
  MemoryEncoder enc(micro(), "codec");
  const auto a = random_latent({2, 4, 8, 8}, 1, "codec");
  const auto b = random_latent({2, 4, 8, 8}, 2, "codec");
  // One training-mode pass moves the running statistics off their defaults.
  enc.forward({&a.data, &b.data}, {.training = true});
  const MemoryTokens before = enc.encode_reference(a, "a");
  MemoryEncoder other(micro(), "codec");
  other.load_archive(enc.to_archive());
  CHECK(other.version() == enc.version());
  CHECK(bit_identical(other.encode_reference(a, "a").tokens, before.tokens));
}

TEST_CASE("encoder gradients match finite differences") {
  EncoderConfig cfg = micro();
  cfg.block_channels = {2};
  MemoryEncoder enc(cfg, "codec");
  enc.parameters().set_trainable(true);
  const auto a = random_latent({2, 4, 8, 8}, 1, "codec");
  const auto b = random_latent({2, 4, 8, 8}, 2, "codec");
  Rng rng(99);
  Tensor w({8, 8});
  rng.fill_normal(w.data());
  std::vector<Var> leaves;
  for (auto& p : enc.parameters().params()) leaves.push_back(p.var);
  auto f = [&] {
    auto out = enc.forward({&a.data, &b.data}, {.training = true, .update_running_stats = false});
    const Var parts[] = {out.per_video[0], out.per_video[1]};
    return ag::sum(ag::mul(ag::concat_rows(parts), Var::constant(w)));
  };
  const auto r = ditmem::testing::gradcheck(leaves, f);
  INFO(r.worst);
  CHECK(r.max_rel < 1e-4);
}
