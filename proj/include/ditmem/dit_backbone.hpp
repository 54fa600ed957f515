#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ditmem/autograd.hpp"
#include "ditmem/latent_codec.hpp"
#include "ditmem/memory_encoder.hpp"
#include "ditmem/nn.hpp"

namespace ditmem {

struct BackboneConfig {
  std::size_t n_blocks = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  Shape patch = {2, 4, 4};
  std::size_t cond_dim = 64;
  std::size_t in_channels = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vocab = 256;       // hashed caption vocabulary
  std::size_t freq_dim = 128;    // sinusoidal timestep features
  std::uint64_t seed = 11;
  // Apply each block's LayerNorm and adaLN modulation to the memory rows as
  // well as the video rows before self-attention.
  bool normalize_memory = false;

  void validate() const;
};

// Space-to-token rearrangement without projections.
// z [C, D, H, W] -> [N, C*pt*ph*pw], tokens ordered (d, h, w) row-major.
Tensor patchify_rearrange(const Tensor& z, const Shape& patch);
Tensor unpatchify_rearrange(const Tensor& tokens, const Shape& origin_chw, const Shape& patch);
std::size_t token_count(const Shape& latent_dhw, const Shape& patch);

// Per-call instrumentation for the cross-attention sublayer of every block.
struct CrossAttnHooks {
  // Receives (layer, pre-residual cross-attention output [N, d]).
  std::function<void(std::size_t, const Tensor&)> tap;
  // Per-layer vector added to every token's cross-attention output; an empty
  // entry (or a shorter list) leaves that layer untouched.
  const std::vector<std::vector<double>>* inject = nullptr;
  // Receives the key/value position count of each block's self-attention.
  std::vector<std::size_t>* attention_positions = nullptr;
};

// Frozen toy diffusion transformer with memory-augmented self-attention.
class DitBackbone {
 public:
  explicit DitBackbone(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // Caption -> condition tokens [L, cond_dim]; a null token leads every caption.
  Tensor encode_text(const std::string& caption) const;

  // Latent -> projected video tokens with 3D positions, [N, d].
  Var patchify(const Tensor& z) const;
  // Final-layer patch vectors [N, C*pt*ph*pw] -> latent [C, D, H, W].
  Var unpatchify(const Var& patches, const Shape& origin_dhw) const;

  // Self-attention over [x ; mem]; returns the N video rows after the output
  // projection. mem may be null or empty.
  Var mem_self_attention(const Var& x, const Var* mem, std::size_t layer,
                         const CrossAttnHooks* hooks = nullptr) const;
  Var cross_attention(const Var& x, const Tensor& cond, std::size_t layer,
                      const CrossAttnHooks* hooks = nullptr) const;

  // Noise prediction for z_t [C, D, H, W] at integer timestep t.
  Var forward_denoiser(const Tensor& z_t, std::size_t t, const Tensor& cond, const Var* mem,
                       const CrossAttnHooks* hooks = nullptr) const;

  std::string fingerprint() const;

 private:
  const Var& p(const std::string& name) const { return params_.get(name); }
  std::string blk(std::size_t layer, const char* name) const;
  Var timestep_embedding(std::size_t t) const;

  BackboneConfig cfg_;
  ParameterSet params_{"backbone"};
};

// Frozen/trainable split over every parameter of the assembled model.
struct ParameterPartition {
  std::vector<const Parameter*> frozen;
  std::vector<const Parameter*> trainable;
};
ParameterPartition parameter_partition(const LatentCodec& codec, const DitBackbone& backbone,
                                       const MemoryEncoder& encoder);

// SHA-256 over the serialized codec and backbone parameters.
std::string frozen_digest(const LatentCodec& codec, const DitBackbone& backbone);

}  // namespace ditmem
