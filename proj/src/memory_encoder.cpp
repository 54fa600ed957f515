#include "ditmem/memory_encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"

namespace ditmem {

std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::kLow:
      return "low";
    case Branch::kHigh:
      return "high";
    case Branch::kPlain:
      return "plain";
  }
  return "?";
}

Branch parse_branch(std::string_view s) {
  if (s == "low") return Branch::kLow;
  if (s == "high") return Branch::kHigh;
  if (s == "plain") return Branch::kPlain;
  throw DataError("unknown branch '" + std::string(s) + "'");
}

std::string_view attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::kNone:
      return "none";
    case AttentionMode::kSeparate:
      return "separate";
    case AttentionMode::kShared:
      return "shared";
  }
  return "?";
}

AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "none") return AttentionMode::kNone;
  if (s == "separate") return AttentionMode::kSeparate;
  if (s == "shared") return AttentionMode::kShared;
  throw std::invalid_argument("unknown attention mode '" + std::string(s) +
                              "' (expected none|separate|shared)");
}

void EncoderConfig::validate() const {
  if (tokens_per_branch < 1) throw std::invalid_argument("tokens_per_branch must be >= 1");
  if (block_channels.empty()) throw std::invalid_argument("encoder needs at least one block");
  if (latent_dhw.size() != 3) throw std::invalid_argument("latent_dhw must have three entries");
  if (kernel % 2 == 0) throw std::invalid_argument("encoder kernel must be odd");
  if (pool < 1) throw std::invalid_argument("pool factor must be >= 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("encoder d_model must be divisible by n_heads");
  }
  if (attention_mode != AttentionMode::kNone && !enable_lpf && !enable_hpf) {
    throw std::invalid_argument("attention requires at least one of enable_lpf/enable_hpf");
  }
}

std::vector<Branch> EncoderConfig::branches() const {
  std::vector<Branch> out;
  if (enable_lpf) out.push_back(Branch::kLow);
  if (enable_hpf) out.push_back(Branch::kHigh);
  if (out.empty() && attention_mode == AttentionMode::kNone) out.push_back(Branch::kPlain);
  return out;
}

MemoryTokens MemoryTokens::concat(const std::vector<MemoryTokens>& parts) {
  MemoryTokens out;
  std::vector<Tensor> blocks;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    if (p.count() == 0) continue;
    if (!out.encoder_version.empty() && p.encoder_version != out.encoder_version) {
      throw DataError("cannot mix memory tokens from different encoder versions");
    }
    out.encoder_version = p.encoder_version;
    blocks.push_back(p.tokens);
    for (auto s : p.spans) {
      s.start += offset;
      out.spans.push_back(std::move(s));
    }
    offset += p.count();
  }
  if (!blocks.empty()) out.tokens = ditmem::concat_rows(blocks);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> adaptive_pool_ranges(std::size_t in,
                                                                      std::size_t out) {
  std::vector<std::pair<std::size_t, std::size_t>> r(out);
  for (std::size_t i = 0; i < out; ++i) {
    const std::size_t start = (i * in) / out;
    const std::size_t end = ((i + 1) * in + out - 1) / out;
    r[i] = {start, end};
  }
  return r;
}

MemoryEncoder::MemoryEncoder(EncoderConfig cfg, std::string codec_fingerprint)
    : cfg_(std::move(cfg)), codec_fingerprint_(std::move(codec_fingerprint)) {
  cfg_.validate();
  build();
}

std::string MemoryEncoder::key(const std::string& base, Branch branch) const {
  if (cfg_.branch_weight_sharing) return base;
  return std::string(branch_name(branch)) + "." + base;
}

std::string MemoryEncoder::attn_prefix(Branch branch) const {
  if (cfg_.attention_mode == AttentionMode::kShared) return "attn.";
  return "attn_" + std::string(branch_name(branch)) + ".";
}

void MemoryEncoder::build() {
  Rng rng(cfg_.seed);
  const auto branches = cfg_.branches();
  std::vector<Branch> weight_owners =
      cfg_.branch_weight_sharing ? std::vector<Branch>{branches.front()} : branches;

  Shape dhw = cfg_.latent_dhw;
  std::size_t cin = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.block_channels.size(); ++i) {
    const std::size_t co = cfg_.block_channels[i];
    const std::size_t k = cfg_.kernel;
    const std::string blk = "block" + std::to_string(i) + ".";
    for (Branch b : weight_owners) {
      const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
      params_.add(key(blk + "conv.weight", b), normal_init({co, cin, k, k, k}, std, rng));
      params_.add(key(blk + "conv.bias", b), Tensor({co}));
      params_.add(key(blk + "bn.gamma", b), Tensor({co}, 1.0));
      params_.add(key(blk + "bn.beta", b), Tensor({co}));
    }
    for (Branch b : branches) {
      running_[blk + std::string(branch_name(b)) + ".mean"] = std::vector<double>(co, 0.0);
      running_[blk + std::string(branch_name(b)) + ".var"] = std::vector<double>(co, 1.0);
    }
    for (auto& d : dhw) {
      if (d < cfg_.pool) {
        throw std::invalid_argument("latent dims " + shape_to_string(cfg_.latent_dhw) +
                                    " too small for " + std::to_string(cfg_.block_channels.size()) +
                                    " pooling blocks");
      }
      d /= cfg_.pool;
    }
    cin = co;
  }
  token_feature_dhw_ = dhw;
  const std::size_t feat = cin * dhw[1] * dhw[2];
  const std::size_t d = cfg_.d_model;
  for (Branch b : weight_owners) {
    params_.add(key("proj.weight", b), DenseInit::weight(feat, d, rng));
    params_.add(key("proj.bias", b), Tensor({d}));
  }

  if (cfg_.attention_mode != AttentionMode::kNone) {
    std::vector<Branch> attn_owners =
        cfg_.attention_mode == AttentionMode::kShared ? std::vector<Branch>{branches.front()} : branches;
    for (Branch b : attn_owners) {
      const std::string pre = attn_prefix(b);
      params_.add(pre + "ln1.gamma", Tensor({d}, 1.0));
      params_.add(pre + "ln1.beta", Tensor({d}));
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        params_.add(pre + w, DenseInit::weight(d, d, rng));
        params_.add(pre + "b" + std::string(w + 1), Tensor({d}));
      }
      params_.add(pre + "ln2.gamma", Tensor({d}, 1.0));
      params_.add(pre + "ln2.beta", Tensor({d}));
      const std::size_t hidden = d * cfg_.mlp_ratio;
      params_.add(pre + "mlp.w1", DenseInit::weight(d, hidden, rng));
      params_.add(pre + "mlp.b1", Tensor({hidden}));
      params_.add(pre + "mlp.w2", DenseInit::weight(hidden, d, rng));
      params_.add(pre + "mlp.b2", Tensor({d}));
    }
  }
}

std::vector<Parameter*> MemoryEncoder::trainable() {
  std::vector<Parameter*> out;
  for (auto& prm : params_.params()) out.push_back(&prm);
  return out;
}

namespace {

Var block_tail(const Var& conv_out, const MemoryEncoder& enc, const EncoderConfig& cfg,
               std::size_t block_index, Branch branch, const Var& gamma, const Var& beta,
               std::map<std::string, std::vector<double>>& running,
               MemoryEncoder::ForwardOptions opts) {
  (void)enc;
  Var x = conv_out;
  if (branch != Branch::kPlain) {
    const auto band = branch == Branch::kLow ? freq::Band::kLow : freq::Band::kHigh;
    const Shape grid = freq::fft_grid(x.value());
    x = ag::spectral_filter(
        x, freq::build_mask(grid, band, cfg.cutoff_rho, cfg.attenuation_gamma), true);
  }
  const std::string stat = "block" + std::to_string(block_index) + "." +
                           std::string(branch_name(branch));
  auto& rmean = running.at(stat + ".mean");
  auto& rvar = running.at(stat + ".var");
  ag::BatchStats stats;
  x = ag::batch_norm(x, gamma, beta, opts.training, rmean, rvar, cfg.bn_eps, &stats);
  if (opts.training && opts.update_running_stats) {
    const double n = static_cast<double>(x.value().numel() / x.dim(1));
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t c = 0; c < rmean.size(); ++c) {
      rmean[c] = (1.0 - cfg.bn_momentum) * rmean[c] + cfg.bn_momentum * stats.mean[c];
      rvar[c] = (1.0 - cfg.bn_momentum) * rvar[c] + cfg.bn_momentum * stats.var[c] * unbias;
    }
  }
  x = ag::relu(x);
  return ag::max_pool3d(x, cfg.pool, cfg.pool, cfg.pool);
}

}  // namespace

Var MemoryEncoder::conv_block_forward(const Var& x, std::size_t block_index, Branch branch,
                                      ForwardOptions opts) {
  if (block_index >= cfg_.block_channels.size()) throw std::out_of_range("no such encoder block");
  if (x.shape().size() == 4) {
    Shape batched = x.shape();
    batched.insert(batched.begin(), 1);
    Var y = conv_block_forward(ag::reshape(x, batched), block_index, branch, opts);
    Shape out = y.shape();
    out.erase(out.begin());
    return ag::reshape(y, out);
  }
  const std::string blk = "block" + std::to_string(block_index) + ".";
  const Var c = ag::conv3d(x, p(key(blk + "conv.weight", branch)), p(key(blk + "conv.bias", branch)));
  return block_tail(c, *this, cfg_, block_index, branch, p(key(blk + "bn.gamma", branch)),
                    p(key(blk + "bn.beta", branch)), running_, opts);
}

Var MemoryEncoder::tokenize(const Var& features, Branch branch) {
  if (!features.value().all_finite()) throw NumericError("encoder features are non-finite");
  const std::size_t B = features.dim(0), C = features.dim(1), D = features.dim(2),
                    H = features.dim(3), W = features.dim(4);
  const std::size_t F = C * H * W;
  std::vector<std::size_t> index(B * D * F);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t hw = 0; hw < H * W; ++hw) {
          index[((b * D + d) * C + c) * H * W + hw] = ((b * C + c) * D + d) * H * W + hw;
        }
  Var rows = ag::gather(features, std::move(index), {B * D, F});

  const std::size_t T = cfg_.tokens_per_branch;
  Tensor pool({B * T, B * D});
  const auto ranges = adaptive_pool_ranges(D, T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      const auto [s, e] = ranges[t];
      for (std::size_t d = s; d < e; ++d) {
        pool.at(b * T + t, b * D + d) = 1.0 / static_cast<double>(e - s);
      }
    }
  Var pooled = ag::matmul(Var::constant(std::move(pool)), rows);
  if (pooled.dim(1) != p(key("proj.weight", branch)).dim(0)) {
    throw DataError("tokenize: feature width " + std::to_string(pooled.dim(1)) +
                    " does not match projection input " +
                    std::to_string(p(key("proj.weight", branch)).dim(0)));
  }
  return ag::linear(pooled, p(key("proj.weight", branch)), p(key("proj.bias", branch)));
}

Var MemoryEncoder::self_attention(const Var& x, Branch branch) {
  if (cfg_.attention_mode == AttentionMode::kNone) {
    throw std::logic_error("self_attention called with attention_mode none");
  }
  const std::string pre = attn_prefix(branch);
  Var h = ag::add_rows(ag::mul_rows(ag::layer_norm(x), p(pre + "ln1.gamma")), p(pre + "ln1.beta"));
  Var q = ag::linear(h, p(pre + "wq"), p(pre + "bq"));
  Var k = ag::linear(h, p(pre + "wk"), p(pre + "bk"));
  Var v = ag::linear(h, p(pre + "wv"), p(pre + "bv"));
  Var a = ag::linear(ag::attention(q, k, v, cfg_.n_heads), p(pre + "wo"), p(pre + "bo"));
  Var x1 = ag::add(x, a);
  Var h2 = ag::add_rows(ag::mul_rows(ag::layer_norm(x1), p(pre + "ln2.gamma")), p(pre + "ln2.beta"));
  Var m = ag::linear(ag::gelu(ag::linear(h2, p(pre + "mlp.w1"), p(pre + "mlp.b1"))),
                     p(pre + "mlp.w2"), p(pre + "mlp.b2"));
  return ag::add(x1, m);
}

std::pair<Var, Var> MemoryEncoder::shared_attention(const Var& tokens_low, const Var& tokens_high) {
  return {self_attention(tokens_low, Branch::kLow), self_attention(tokens_high, Branch::kHigh)};
}

MemoryEncoder::Encoded MemoryEncoder::forward(const std::vector<const Tensor*>& latents,
                                              ForwardOptions opts) {
  if (latents.empty()) throw std::invalid_argument("encoder forward needs at least one latent");
  const Shape expect = {cfg_.in_channels, cfg_.latent_dhw[0], cfg_.latent_dhw[1], cfg_.latent_dhw[2]};
  const std::size_t B = latents.size();
  Tensor stacked({B, expect[0], expect[1], expect[2], expect[3]});
  const std::size_t per = shape_numel(expect);
  for (std::size_t b = 0; b < B; ++b) {
    if (latents[b]->shape() != expect) {
      throw DataError("encoder expects latent " + shape_to_string(expect) + ", got " +
                      shape_to_string(latents[b]->shape()));
    }
    std::copy(latents[b]->storage().begin(), latents[b]->storage().end(),
              stacked.storage().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  const Var input = Var::constant(std::move(stacked));

  const auto branches = cfg_.branches();
  if (branches.empty()) throw std::invalid_argument("encoder config disables every branch");

  // With shared weights the first convolution is identical for every branch.
  Var shared_conv0;
  std::vector<Var> branch_tokens;
  for (Branch br : branches) {
    Var x = input;
    for (std::size_t i = 0; i < cfg_.block_channels.size(); ++i) {
      const std::string blk = "block" + std::to_string(i) + ".";
      Var c;
      if (i == 0 && cfg_.branch_weight_sharing && shared_conv0.defined()) {
        c = shared_conv0;
      } else {
        c = ag::conv3d(x, p(key(blk + "conv.weight", br)), p(key(blk + "conv.bias", br)));
        if (i == 0 && cfg_.branch_weight_sharing) shared_conv0 = c;
      }
      x = block_tail(c, *this, cfg_, i, br, p(key(blk + "bn.gamma", br)),
                     p(key(blk + "bn.beta", br)), running_, opts);
    }
    branch_tokens.push_back(tokenize(x, br));
  }

  const std::size_t T = cfg_.tokens_per_branch;
  Encoded out;
  out.branches = branches;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Var> parts;
    for (std::size_t j = 0; j < branches.size(); ++j) {
      Var t = ag::slice_rows(branch_tokens[j], b * T, T);
      if (cfg_.attention_mode != AttentionMode::kNone) t = self_attention(t, branches[j]);
      parts.push_back(std::move(t));
    }
    out.per_video.push_back(parts.size() == 1 ? parts[0] : ag::concat_rows(parts));
  }
  return out;
}

std::size_t MemoryEncoder::tokens_per_video() const {
  return cfg_.tokens_per_branch * cfg_.branches().size();
}

MemoryTokens MemoryEncoder::encode_reference(const LatentVideo& z, const std::string& video_id) {
  return encode_references({{video_id, &z}});
}

MemoryTokens MemoryEncoder::encode_references(
    const std::vector<std::pair<std::string, const LatentVideo*>>& refs) {
  if (cfg_.branches().empty()) throw std::invalid_argument("encoder config disables every branch");
  std::vector<const Tensor*> latents;
  for (const auto& [id, z] : refs) {
    if (z->codec_fingerprint != codec_fingerprint_) {
      throw DataError("reference " + id + " was encoded by codec " + z->codec_fingerprint +
                      ", active codec is " + codec_fingerprint_);
    }
    latents.push_back(&z->data);
  }
  MemoryTokens out;
  out.encoder_version = version();
  if (refs.empty()) return out;
  const Encoded enc = forward(latents, {.training = false});
  std::vector<Tensor> blocks;
  const std::size_t T = cfg_.tokens_per_branch;
  std::size_t offset = 0;
  for (std::size_t v = 0; v < refs.size(); ++v) {
    blocks.push_back(enc.per_video[v].value());
    for (Branch br : enc.branches) {
      out.spans.push_back({refs[v].first, offset, T, br});
      offset += T;
    }
  }
  out.tokens = ditmem::concat_rows(blocks);
  if (!out.tokens.all_finite()) throw NumericError("memory tokens are non-finite");
  return out;
}

std::string MemoryEncoder::version() const {
  Fnv64 h;
  h.update("ditmem-encoder-v1");
  h.update(codec_fingerprint_);
  h.update_u64(cfg_.in_channels);
  for (auto d : cfg_.latent_dhw) h.update_u64(d);
  for (auto c : cfg_.block_channels) h.update_u64(c);
  h.update_u64(cfg_.kernel);
  h.update_u64(cfg_.pool);
  h.update_f64(cfg_.cutoff_rho);
  h.update_f64(cfg_.attenuation_gamma);
  h.update_u64(cfg_.tokens_per_branch);
  h.update_u64(cfg_.d_model);
  h.update_u64(cfg_.n_heads);
  h.update_u64(cfg_.mlp_ratio);
  h.update_u64(cfg_.branch_weight_sharing);
  h.update_u64(static_cast<std::uint64_t>(cfg_.attention_mode));
  h.update_u64(cfg_.enable_lpf);
  h.update_u64(cfg_.enable_hpf);
  h.update_f64(cfg_.bn_eps);
  params_.hash_into(h);
  for (const auto& [name, values] : running_) {
    h.update(name);
    h.update_f64s(values);
  }
  return hex64(h.digest());
}

TensorArchive MemoryEncoder::to_archive() const {
  TensorArchive a = params_.to_archive();
  for (const auto& [name, values] : running_) {
    a.tensors.emplace("running/" + name, Tensor({values.size()}, values));
  }
  a.meta["version"] = version();
  return a;
}

void MemoryEncoder::load_archive(const TensorArchive& archive) {
  params_.load_archive(archive);
  for (auto& [name, values] : running_) {
    auto it = archive.tensors.find("running/" + name);
    if (it == archive.tensors.end() || it->second.numel() != values.size()) {
      throw DataError("encoder archive lacks running statistics " + name);
    }
    values = it->second.storage();
  }
}

}  // namespace ditmem
