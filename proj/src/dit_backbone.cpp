#include "ditmem/dit_backbone.hpp"

#include <set>
#include <stdexcept>

#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"
#include "ditmem/text.hpp"

namespace ditmem {

void BackboneConfig::validate() const {
  if (n_blocks == 0) throw std::invalid_argument("backbone needs at least one block");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("backbone d_model must be divisible by n_heads");
  }
  if (d_model % 2 != 0) throw std::invalid_argument("backbone d_model must be even");
  if (patch.size() != 3 || patch[0] == 0 || patch[1] == 0 || patch[2] == 0) {
    throw std::invalid_argument("backbone patch must have three positive entries");
  }
  if (cond_dim == 0 || vocab == 0 || freq_dim < 2 || in_channels == 0) {
    throw std::invalid_argument("backbone widths must be positive");
  }
}

namespace {

// For each latent element (row-major over [C, D, H, W]) its position in the
// row-major [N, C*pt*ph*pw] patch matrix.
std::vector<std::size_t> patch_positions(const Shape& chw, const Shape& patch) {
  const std::size_t C = chw[0], D = chw[1], H = chw[2], W = chw[3];
  const std::size_t pt = patch[0], ph = patch[1], pw = patch[2];
  if (D % pt || H % ph || W % pw) {
    throw DataError("latent dims " + shape_to_string({D, H, W}) + " not divisible by patch " +
                    shape_to_string(patch));
  }
  const std::size_t Hn = H / ph, Wn = W / pw, P = C * pt * ph * pw;
  std::vector<std::size_t> idx(C * D * H * W);
  std::size_t e = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w, ++e) {
          const std::size_t n = ((d / pt) * Hn + h / ph) * Wn + w / pw;
          const std::size_t j = ((c * pt + d % pt) * ph + h % ph) * pw + w % pw;
          idx[e] = n * P + j;
        }
  return idx;
}

Var ln_mod(const Var& x, const Var& shift, const Var& scale) {
  return ag::modulate(ag::layer_norm(x), shift, scale);
}

}  // namespace

std::size_t token_count(const Shape& dhw, const Shape& patch) {
  if (dhw.size() != 3 || patch.size() != 3) throw std::invalid_argument("token_count needs 3 dims");
  if (dhw[0] % patch[0] || dhw[1] % patch[1] || dhw[2] % patch[2]) {
    throw DataError("latent dims " + shape_to_string(dhw) + " not divisible by patch " +
                    shape_to_string(patch));
  }
  return (dhw[0] / patch[0]) * (dhw[1] / patch[1]) * (dhw[2] / patch[2]);
}

Tensor patchify_rearrange(const Tensor& z, const Shape& patch) {
  if (z.rank() != 4) throw DataError("patchify expects [C, D, H, W], got " + shape_to_string(z.shape()));
  const auto idx = patch_positions(z.shape(), patch);
  const std::size_t P = z.dim(0) * patch[0] * patch[1] * patch[2];
  Tensor out({z.numel() / P, P});
  for (std::size_t e = 0; e < idx.size(); ++e) out[idx[e]] = z[e];
  return out;
}

Tensor unpatchify_rearrange(const Tensor& tokens, const Shape& chw, const Shape& patch) {
  const auto idx = patch_positions(chw, patch);
  if (tokens.numel() != idx.size()) {
    throw DataError("unpatchify: " + shape_to_string(tokens.shape()) + " does not tile " +
                    shape_to_string(chw));
  }
  Tensor out(chw);
  for (std::size_t e = 0; e < idx.size(); ++e) out[e] = tokens[idx[e]];
  return out;
}

DitBackbone::DitBackbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const std::size_t d = cfg_.d_model, P = cfg_.in_channels * cfg_.patch[0] * cfg_.patch[1] * cfg_.patch[2];
  params_.add("text.embed", normal_init({cfg_.vocab + 1, cfg_.cond_dim}, 1.0, rng));
  params_.add("x_embed.w", DenseInit::weight(P, d, rng));
  params_.add("x_embed.b", Tensor({d}));
  params_.add("t_embed.w1", DenseInit::weight(cfg_.freq_dim, d, rng));
  params_.add("t_embed.b1", Tensor({d}));
  params_.add("t_embed.w2", DenseInit::weight(d, d, rng));
  params_.add("t_embed.b2", Tensor({d}));
  for (std::size_t l = 0; l < cfg_.n_blocks; ++l) {
    for (const char* m : {"shift1", "scale1", "gate1", "shift2", "scale2", "gate2"}) {
      params_.add(blk(l, (std::string("ada.") + m + ".w").c_str()), DenseInit::weight(d, d, rng, 0.1));
      const bool gate = std::string(m).rfind("gate", 0) == 0;
      params_.add(blk(l, (std::string("ada.") + m + ".b").c_str()), Tensor({d}, gate ? 1.0 : 0.0));
    }
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      params_.add(blk(l, w), DenseInit::weight(d, d, rng));
      params_.add(blk(l, (std::string(w).substr(0, 5) + "b" + std::string(w).substr(6)).c_str()),
                  Tensor({d}));
    }
    params_.add(blk(l, "xattn.wq"), DenseInit::weight(d, d, rng));
    params_.add(blk(l, "xattn.bq"), Tensor({d}));
    params_.add(blk(l, "xattn.wk"), DenseInit::weight(cfg_.cond_dim, d, rng));
    params_.add(blk(l, "xattn.bk"), Tensor({d}));
    params_.add(blk(l, "xattn.wv"), DenseInit::weight(cfg_.cond_dim, d, rng));
    params_.add(blk(l, "xattn.bv"), Tensor({d}));
    params_.add(blk(l, "xattn.wo"), DenseInit::weight(d, d, rng));
    params_.add(blk(l, "xattn.bo"), Tensor({d}));
    const std::size_t hidden = d * cfg_.mlp_ratio;
    params_.add(blk(l, "mlp.w1"), DenseInit::weight(d, hidden, rng));
    params_.add(blk(l, "mlp.b1"), Tensor({hidden}));
    params_.add(blk(l, "mlp.w2"), DenseInit::weight(hidden, d, rng));
    params_.add(blk(l, "mlp.b2"), Tensor({d}));
  }
  params_.add("final.shift.w", DenseInit::weight(d, d, rng, 0.1));
  params_.add("final.shift.b", Tensor({d}));
  params_.add("final.scale.w", DenseInit::weight(d, d, rng, 0.1));
  params_.add("final.scale.b", Tensor({d}));
  params_.add("final.w", DenseInit::weight(d, P, rng));
  params_.add("final.b", Tensor({P}));
}

std::string DitBackbone::blk(std::size_t layer, const char* name) const {
  return "block" + std::to_string(layer) + "." + name;
}

Tensor DitBackbone::encode_text(const std::string& caption) const {
  const auto words = caption_words(caption);
  const Tensor& table = p("text.embed").value();
  const std::size_t dc = cfg_.cond_dim;
  Tensor out({words.size() + 1, dc});
  for (std::size_t i = 0; i <= words.size(); ++i) {
    std::size_t row = cfg_.vocab;  // null token
    if (i > 0) {
      Fnv64 h;
      h.update("ditmem-text");
      h.update(words[i - 1]);
      row = static_cast<std::size_t>(h.digest() % cfg_.vocab);
    }
    const auto pos = sinusoidal_embedding(static_cast<double>(i), dc);
    for (std::size_t j = 0; j < dc; ++j) out.at(i, j) = table.at(row, j) + 0.5 * pos[j];
  }
  return out;
}

Var DitBackbone::patchify(const Tensor& z) const {
  if (z.rank() != 4 || z.dim(0) != cfg_.in_channels) {
    throw DataError("backbone expects latent [" + std::to_string(cfg_.in_channels) +
                    ", D, H, W], got " + shape_to_string(z.shape()));
  }
  const Tensor rows = patchify_rearrange(z, cfg_.patch);
  const std::size_t Dn = z.dim(1) / cfg_.patch[0], Hn = z.dim(2) / cfg_.patch[1],
                    Wn = z.dim(3) / cfg_.patch[2];
  const std::size_t d = cfg_.d_model, a = 2 * (d / 6), c = d - 2 * a;
  Tensor pos({rows.dim(0), d});
  std::size_t n = 0;
  for (std::size_t i = 0; i < Dn; ++i)
    for (std::size_t j = 0; j < Hn; ++j)
      for (std::size_t k = 0; k < Wn; ++k, ++n) {
        const auto ed = sinusoidal_embedding(static_cast<double>(i), a);
        const auto eh = sinusoidal_embedding(static_cast<double>(j), a);
        const auto ew = sinusoidal_embedding(static_cast<double>(k), c);
        std::copy(ed.begin(), ed.end(), &pos.at(n, 0));
        std::copy(eh.begin(), eh.end(), &pos.at(n, a));
        std::copy(ew.begin(), ew.end(), &pos.at(n, 2 * a));
      }
  Var x = ag::linear(Var::constant(rows), p("x_embed.w"), p("x_embed.b"));
  return ag::add(x, Var::constant(std::move(pos)));
}

Var DitBackbone::unpatchify(const Var& patches, const Shape& dhw) const {
  const Shape chw = {cfg_.in_channels, dhw[0], dhw[1], dhw[2]};
  return ag::gather(patches, patch_positions(chw, cfg_.patch), chw);
}

Var DitBackbone::timestep_embedding(std::size_t t) const {
  const auto f = sinusoidal_embedding(static_cast<double>(t), cfg_.freq_dim);
  Var e = Var::constant(Tensor({1, cfg_.freq_dim}, f));
  e = ag::silu(ag::linear(e, p("t_embed.w1"), p("t_embed.b1")));
  return ag::linear(e, p("t_embed.w2"), p("t_embed.b2"));
}

Var DitBackbone::mem_self_attention(const Var& x, const Var* mem, std::size_t layer,
                                    const CrossAttnHooks* hooks) const {
  if (layer >= cfg_.n_blocks) throw std::out_of_range("no such backbone block");
  Var kv = x;
  if (mem && mem->defined() && mem->value().numel() > 0) {
    if (mem->shape().size() != 2 || mem->dim(1) != cfg_.d_model) {
      throw DataError("memory width " + shape_to_string(mem->shape()) +
                      " does not match backbone d_model " + std::to_string(cfg_.d_model));
    }
    const Var parts[] = {x, *mem};
    kv = ag::concat_rows(parts);
  }
  if (hooks && hooks->attention_positions) hooks->attention_positions->push_back(kv.dim(0));
  // Only the video rows are queried: the memory rows' outputs would be discarded.
  const Var q = ag::linear(x, p(blk(layer, "attn.wq")), p(blk(layer, "attn.bq")));
  const Var k = ag::linear(kv, p(blk(layer, "attn.wk")), p(blk(layer, "attn.bk")));
  const Var v = ag::linear(kv, p(blk(layer, "attn.wv")), p(blk(layer, "attn.bv")));
  return ag::linear(ag::attention(q, k, v, cfg_.n_heads), p(blk(layer, "attn.wo")),
                    p(blk(layer, "attn.bo")));
}

Var DitBackbone::cross_attention(const Var& x, const Tensor& cond, std::size_t layer,
                                 const CrossAttnHooks* hooks) const {
  if (cond.rank() != 2 || cond.dim(1) != cfg_.cond_dim) {
    throw DataError("condition must be [L, " + std::to_string(cfg_.cond_dim) + "], got " +
                    shape_to_string(cond.shape()));
  }
  const Var c = Var::constant(cond);
  const Var q = ag::linear(x, p(blk(layer, "xattn.wq")), p(blk(layer, "xattn.bq")));
  const Var k = ag::linear(c, p(blk(layer, "xattn.wk")), p(blk(layer, "xattn.bk")));
  const Var v = ag::linear(c, p(blk(layer, "xattn.wv")), p(blk(layer, "xattn.bv")));
  Var out = ag::linear(ag::attention(q, k, v, cfg_.n_heads), p(blk(layer, "xattn.wo")),
                       p(blk(layer, "xattn.bo")));
  if (hooks && hooks->tap) hooks->tap(layer, out.value());
  if (hooks && hooks->inject && layer < hooks->inject->size() && !(*hooks->inject)[layer].empty()) {
    const auto& vec = (*hooks->inject)[layer];
    if (vec.size() != cfg_.d_model) {
      throw std::invalid_argument("steering vector width " + std::to_string(vec.size()) +
                                  " does not match d_model " + std::to_string(cfg_.d_model));
    }
    out = ag::add_rows(out, Var::constant(Tensor({cfg_.d_model}, vec)));
  }
  return out;
}

Var DitBackbone::forward_denoiser(const Tensor& z_t, std::size_t t, const Tensor& cond,
                                  const Var* mem, const CrossAttnHooks* hooks) const {
  if (!z_t.all_finite()) throw NumericError("denoiser input is non-finite");
  Var h = patchify(z_t);
  const Var temb = ag::silu(timestep_embedding(t));
  auto ada = [&](std::size_t l, const char* m) {
    const std::string base = std::string("ada.") + m;
    return ag::linear(temb, p(blk(l, (base + ".w").c_str())), p(blk(l, (base + ".b").c_str())));
  };
  for (std::size_t l = 0; l < cfg_.n_blocks; ++l) {
    const Var shift1 = ada(l, "shift1"), scale1 = ada(l, "scale1");
    Var mem_l;
    const Var* mem_in = mem;
    if (cfg_.normalize_memory && mem && mem->defined() && mem->value().numel() > 0) {
      mem_l = ln_mod(*mem, shift1, scale1);
      mem_in = &mem_l;
    }
    const Var a = mem_self_attention(ln_mod(h, shift1, scale1), mem_in, l, hooks);
    h = ag::add(h, ag::mul_rows(a, ada(l, "gate1")));
    h = ag::add(h, cross_attention(ag::layer_norm(h), cond, l, hooks));
    Var m = ln_mod(h, ada(l, "shift2"), ada(l, "scale2"));
    m = ag::linear(ag::gelu(ag::linear(m, p(blk(l, "mlp.w1")), p(blk(l, "mlp.b1")))),
                   p(blk(l, "mlp.w2")), p(blk(l, "mlp.b2")));
    h = ag::add(h, ag::mul_rows(m, ada(l, "gate2")));
  }
  const Var shift = ag::linear(temb, p("final.shift.w"), p("final.shift.b"));
  const Var scale = ag::linear(temb, p("final.scale.w"), p("final.scale.b"));
  const Var out = ag::linear(ln_mod(h, shift, scale), p("final.w"), p("final.b"));
  return unpatchify(out, {z_t.dim(1), z_t.dim(2), z_t.dim(3)});
}

std::string DitBackbone::fingerprint() const {
  Fnv64 h;
  h.update("ditmem-backbone-v1");
  h.update_u64(cfg_.n_blocks);
  h.update_u64(cfg_.d_model);
  h.update_u64(cfg_.n_heads);
  for (auto v : cfg_.patch) h.update_u64(v);
  h.update_u64(cfg_.cond_dim);
  h.update_u64(cfg_.in_channels);
  h.update_u64(cfg_.mlp_ratio);
  h.update_u64(cfg_.vocab);
  h.update_u64(cfg_.freq_dim);
  params_.hash_into(h);
  return hex64(h.digest());
}

ParameterPartition parameter_partition(const LatentCodec& codec, const DitBackbone& backbone,
                                       const MemoryEncoder& encoder) {
  ParameterPartition part;
  std::set<const detail::Node*> seen;
  auto take = [&](const ParameterSet& set, std::vector<const Parameter*>& into, bool frozen) {
    for (const auto& prm : set.params()) {
      if (!seen.insert(prm.var.node().get()).second) {
        throw std::logic_error("parameter " + set.owner() + "." + prm.name +
                               " appears in more than one set");
      }
      if (frozen && prm.var.requires_grad()) {
        throw std::logic_error("frozen parameter " + set.owner() + "." + prm.name +
                               " requires gradients");
      }
      into.push_back(&prm);
    }
  };
  take(codec.parameters(), part.frozen, true);
  take(backbone.parameters(), part.frozen, true);
  take(encoder.parameters(), part.trainable, false);
  return part;
}

std::string frozen_digest(const LatentCodec& codec, const DitBackbone& backbone) {
  Sha256 h;
  codec.parameters().sha256_into(h);
  backbone.parameters().sha256_into(h);
  return h.hex_digest();
}

}  // namespace ditmem
