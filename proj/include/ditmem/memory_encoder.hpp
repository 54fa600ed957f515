#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditmem/autograd.hpp"
#include "ditmem/freq_filter.hpp"
#include "ditmem/latent_codec.hpp"
#include "ditmem/nn.hpp"

namespace ditmem {

// PLAIN is the unfiltered single stream used when both filters are disabled
// (the convolution-only ablation).
enum class Branch { kLow, kHigh, kPlain };
std::string_view branch_name(Branch b);
Branch parse_branch(std::string_view s);

enum class AttentionMode { kNone, kSeparate, kShared };
std::string_view attention_mode_name(AttentionMode m);
AttentionMode parse_attention_mode(std::string_view s);

struct EncoderConfig {
  std::size_t in_channels = 4;
  Shape latent_dhw = {8, 8, 8};
  std::vector<std::size_t> block_channels = {16, 32};
  std::size_t kernel = 3;
  std::size_t pool = 2;
  double cutoff_rho = 0.25;
  double attenuation_gamma = 0.2;
  std::size_t tokens_per_branch = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 2;
  bool branch_weight_sharing = true;
  AttentionMode attention_mode = AttentionMode::kShared;
  bool enable_lpf = true;
  bool enable_hpf = true;
  std::uint64_t seed = 13;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const;
  std::vector<Branch> branches() const;
};

struct TokenSpan {
  std::string video_id;
  std::size_t start = 0;
  std::size_t length = 0;
  Branch branch = Branch::kLow;
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Memory tokens for one or more reference videos, [N_mem, d_model].
struct MemoryTokens {
  Tensor tokens;
  std::vector<TokenSpan> spans;
  std::string encoder_version;

  std::size_t count() const { return tokens.empty() ? 0 : tokens.dim(0); }
  static MemoryTokens concat(const std::vector<MemoryTokens>& parts);
};

// Start/end partition used by adaptive average pooling: output i averages
// input positions [floor(i*in/out), ceil((i+1)*in/out)).
std::vector<std::pair<std::size_t, std::size_t>> adaptive_pool_ranges(std::size_t in,
                                                                      std::size_t out);

// Trainable reference-video encoder: stacked 3D conv blocks with embedded
// band filters, temporal tokenization and (shared) self-attention.
class MemoryEncoder {
 public:
  MemoryEncoder(EncoderConfig cfg, std::string codec_fingerprint);

  const EncoderConfig& config() const { return cfg_; }
  const std::string& codec_fingerprint() const { return codec_fingerprint_; }

  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::vector<Parameter*> trainable();

  // Running batch-norm statistics, keyed "<block>.<branch>.mean|var".
  const std::map<std::string, std::vector<double>>& running_stats() const { return running_; }

  struct ForwardOptions {
    bool training = false;
    bool update_running_stats = true;  // only consulted in training mode
  };

  // x [B, C_in, D, H, W] (or unbatched [C_in, D, H, W]) -> channels c_out, dims halved.
  Var conv_block_forward(const Var& x, std::size_t block_index, Branch branch,
                         ForwardOptions opts);

  // features [B, C', D', H', W'] -> [B * tokens_per_branch, d_model]
  Var tokenize(const Var& features, Branch branch);

  // Applies the attention block to one video's tokens [T, d].
  Var self_attention(const Var& tokens, Branch branch);
  std::pair<Var, Var> shared_attention(const Var& tokens_low, const Var& tokens_high);

  // One Var per input video holding its concatenated branch tokens.
  struct Encoded {
    std::vector<Var> per_video;
    std::vector<Branch> branches;  // branch order inside each video's block
  };
  Encoded forward(const std::vector<const Tensor*>& latents, ForwardOptions opts);

  // Inference path (frozen statistics, no tape).
  MemoryTokens encode_reference(const LatentVideo& z, const std::string& video_id);
  MemoryTokens encode_references(const std::vector<std::pair<std::string, const LatentVideo*>>& refs);

  std::size_t tokens_per_video() const;
  std::string version() const;

  TensorArchive to_archive() const;
  void load_archive(const TensorArchive& archive);

 private:
  std::string key(const std::string& base, Branch branch) const;
  std::string attn_prefix(Branch branch) const;
  const Var& p(const std::string& name) const { return params_.get(name); }
  void build();

  EncoderConfig cfg_;
  std::string codec_fingerprint_;
  ParameterSet params_{"encoder"};
  std::map<std::string, std::vector<double>> running_;
  Shape token_feature_dhw_;  // spatial/temporal dims after the last block
};

}  // namespace ditmem
