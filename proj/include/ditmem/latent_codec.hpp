#pragma once

#include <cstdint>
#include <string>

#include "ditmem/nn.hpp"
#include "ditmem/tensor.hpp"

namespace ditmem {

enum class CodecMode { kConv, kIdentity };

CodecMode parse_codec_mode(const std::string& s);

struct CodecConfig {
  CodecMode mode = CodecMode::kConv;
  std::uint64_t seed = 7;
  std::size_t channels = 4;          // latent channels in conv mode
  std::size_t temporal_factor = 2;
  std::size_t spatial_factor = 8;
  double latent_scale = 3.0;         // conv mode output scaling
};

// [3, F, H, W] with values in [0, 1].
struct PixelVideo {
  Tensor data;
  double frame_rate = 8.0;
};

// [C, D, H, W] plus the fingerprint of the codec that produced it.
struct LatentVideo {
  Tensor data;
  std::string codec_fingerprint;
};

// Frozen stand-in for a pretrained video VAE. Conv mode is a seeded
// non-overlapping strided 3D convolution (patch -> channels) whose decoder is
// the least-squares inverse; identity mode is a pure space-to-channel
// rearrangement and round-trips exactly.
class LatentCodec {
 public:
  explicit LatentCodec(CodecConfig cfg = {});

  const CodecConfig& config() const { return cfg_; }
  std::size_t latent_channels() const;
  Shape latent_shape(const Shape& pixel_shape) const;
  Shape pixel_shape(const Shape& latent_shape) const;

  LatentVideo encode(const PixelVideo& v) const;
  PixelVideo decode(const LatentVideo& z) const;

  const std::string& fingerprint() const { return fingerprint_; }

  const ParameterSet& parameters() const { return params_; }
  // Mutable access invalidates the fingerprint until refresh() is called.
  ParameterSet& mutable_parameters() { return params_; }
  void refresh();

 private:
  std::size_t patch_size() const;

  CodecConfig cfg_;
  ParameterSet params_{"codec"};
  Tensor decoder_;  // [patch, C], derived from the weights
  std::string fingerprint_;
};

}  // namespace ditmem
