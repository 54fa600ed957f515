#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ditmem/config.hpp"
#include "ditmem/diffusion.hpp"
#include "ditmem/dit_backbone.hpp"
#include "ditmem/latent_codec.hpp"
#include "ditmem/memory_encoder.hpp"
#include "ditmem/retrieval_bank.hpp"
#include "ditmem/synthetic.hpp"

namespace ditmem {

inline constexpr const char* kVersion = "0.1.0";

// Codec, backbone, encoder and schedule assembled from one RunConfig.
struct Model {
  explicit Model(const RunConfig& cfg);

  RunConfig cfg;
  LatentCodec codec;
  DitBackbone backbone;
  MemoryEncoder encoder;
  NoiseSchedule schedule;
};

// Where pretrained backbones are cached: $DITMEM_DATA_DIR/cache, else ./data/cache.
std::filesystem::path default_cache_dir();

struct PretrainReport {
  bool from_cache = false;
  std::size_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  std::filesystem::path archive;
};

// Fits the backbone (no memory) to synthetic clips so the frozen network is a
// usable denoiser, then freezes it. Results are cached by configuration hash.
PretrainReport prepare_backbone(Model& model, const std::filesystem::path& cache_dir);
std::string pretrain_key(const Model& model);

// Denoising examples with retrieved references. Reference indices point into
// `pool`; `ref_ids` keeps the ranked ids for manifests.
struct TrainItem {
  std::string id;
  Tensor x0;
  Tensor cond;
  std::vector<std::size_t> refs;
};
struct TrainSet {
  std::vector<TrainItem> items;
  std::vector<Tensor> pool;
  std::vector<std::string> pool_ids;
};

// Synthetic clip sets derived from the run seed: training targets
// (training.dataset_size), held-out evaluation clips (training.eval_size) and
// the default bank corpus (retrieval.bank_size).
std::vector<synth::Clip> training_clips(const RunConfig& cfg);
std::vector<synth::Clip> eval_clips(const RunConfig& cfg);
std::vector<synth::Clip> bank_clips(const RunConfig& cfg);

std::vector<BankEntry> caption_entries(const std::vector<synth::Clip>& clips, std::size_t d_embed);

// Encodes `targets` and retrieves top_k references for each caption from
// `bank` (excluding entries with the target's own id).
TrainSet build_train_set(const Model& model, const std::vector<synth::Clip>& targets,
                         const std::vector<synth::Clip>& bank, std::size_t top_k);
TrainSet build_train_set(const Model& model, const std::vector<synth::Clip>& targets,
                         const MemoryBank& bank, std::size_t top_k);
// Same items with every reference latent replaced by zeros.
TrainSet zero_references(const TrainSet& set);

class EncoderTrainer {
 public:
  EncoderTrainer(Model& model, const TrainSet& train, std::uint64_t seed);

  double step();
  std::size_t steps_done() const { return optimizer_.steps_taken(); }
  const std::vector<double>& losses() const { return losses_; }

  // Mean loss over fixed draws with the encoder in inference mode.
  double evaluate(const TrainSet& set, const std::vector<EvalDraw>& draws);
  std::vector<EvalDraw> eval_draws(const TrainSet& set, std::uint64_t seed) const;

  const std::string& frozen_digest_at_start() const { return frozen_digest_; }
  // Throws std::logic_error when the frozen parameters have changed.
  void check_freeze() const;

  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);

 private:
  Var memory_for(const std::vector<Var>& encoded, const std::vector<std::size_t>& refs,
                 const std::vector<std::size_t>& slot) const;

  Model& model_;
  const TrainSet& train_;
  std::uint64_t seed_;
  Adam optimizer_;
  std::vector<double> losses_;
  std::string frozen_digest_;
};

// Encoder variants in reporting order: 3d, hpf, hpf-lpf, spa, sa. Also
// accepted: no-hpf (LPF only) and no-lpf (HPF only), both with shared attention.
const std::vector<std::string>& ablation_order();
RunConfig ablation_variant(const RunConfig& base, const std::string& name);

}  // namespace ditmem
