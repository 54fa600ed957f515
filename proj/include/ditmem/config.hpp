#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ditmem/dit_backbone.hpp"
#include "ditmem/latent_codec.hpp"
#include "ditmem/memory_encoder.hpp"
#include "ditmem/synthetic.hpp"

namespace ditmem {

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::size_t clips = 256;
};

struct FilterConfig {
  double cutoff_rho = 0.25;
  double attenuation_gamma = 0.2;
};

struct DiffusionConfig {
  std::size_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t sampler_steps = 30;
};

struct TrainingConfig {
  std::size_t steps = 200;
  std::size_t batch = 4;
  double lr = 1e-3;
  std::size_t dataset_size = 64;
  std::size_t eval_size = 64;
  std::size_t freeze_check_every = 50;
  std::size_t checkpoint_every = 100;
};

struct RetrievalConfig {
  std::size_t top_k = 5;
  std::size_t d_embed = 256;
  std::size_t bank_size = 200;
  std::string bank_dir;  // empty: $DITMEM_DATA_DIR/bank, else ./data/bank
};

struct SteeringConfig {
  double alpha = 1.0;
  std::string band = "low";
  std::vector<std::size_t> layers;  // empty: all layers
  std::size_t runs_per_side = 4;
};

struct OutputConfig {
  std::string dir = "runs";
  bool png = true;
};

// One run's configuration: INI sections [codec] [backbone] [encoder]
// [filters] [diffusion] [training] [retrieval] [steering] [output] plus the
// global keys seed and float_mode.
struct RunConfig {
  std::uint64_t seed = 42;
  int float_mode = 64;  // blob storage width; arithmetic is always float64

  CodecConfig codec;
  synth::VideoDims video;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  EncoderConfig encoder;
  FilterConfig filters;
  DiffusionConfig diffusion;
  TrainingConfig training;
  RetrievalConfig retrieval;
  SteeringConfig steering;
  OutputConfig output;

  static RunConfig defaults();
  static RunConfig from_ini_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  // "section.key=value"
  void apply_override(const std::string& assignment);
  void set(const std::string& section, const std::string& key, const std::string& value);

  // Propagates shared settings (filters, widths, latent geometry) and checks
  // cross-section consistency.
  void finalize();

  std::string to_ini() const;
  std::string hash() const;
  std::filesystem::path bank_root() const;
};

}  // namespace ditmem
