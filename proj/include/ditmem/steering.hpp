#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditmem/blob_io.hpp"
#include "ditmem/diffusion.hpp"
#include "ditmem/freq_filter.hpp"

namespace ditmem {

// (timestep, layer) -> d-vector
using TraceKey = std::pair<std::size_t, std::size_t>;
using Trace = std::map<TraceKey, std::vector<double>>;

struct SteeringTable {
  Trace vectors;
  bool filtered = false;
  bool normalized = false;
  std::optional<freq::Band> band;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::size_t zero_vectors = 0;  // vectors left at zero by normalization

  std::size_t width() const { return vectors.empty() ? 0 : vectors.begin()->second.size(); }
  std::vector<std::size_t> timesteps() const;
  std::vector<std::size_t> layers() const;
};

struct RunSpec {
  std::string caption;
  std::uint64_t seed = 42;
};

struct CaptureSetup {
  const DitBackbone* backbone = nullptr;
  const NoiseSchedule* schedule = nullptr;
  std::size_t steps = 30;
  Shape latent_shape = {4, 8, 8, 8};

  friend bool operator==(const CaptureSetup&, const CaptureSetup&) = default;
};

// One trace per run holding the patch-mean cross-attention output at every
// sampled (timestep, layer).
Trace capture_run(const RunSpec& run, const CaptureSetup& setup);
std::pair<std::vector<Trace>, std::vector<Trace>> capture_runs(const std::vector<RunSpec>& pos,
                                                               const std::vector<RunSpec>& neg,
                                                               const CaptureSetup& pos_setup,
                                                               const CaptureSetup& neg_setup);

// s = mean(pos) - mean(neg) at every (t, layer).
SteeringTable compute_steering(const std::vector<Trace>& pos, const std::vector<Trace>& neg);

// Relative size below which a filtered vector counts as zero.
inline constexpr double kSteeringZeroTolerance = 1e-12;

// Band-filters each layer's vectors along the timestep axis (no residual).
SteeringTable filter_table(const SteeringTable& table, freq::Band band, double cutoff_rho,
                           double attenuation_gamma);
// L2-normalizes every vector; zero vectors stay zero and are counted.
SteeringTable normalize_table(const SteeringTable& table);
// filter_table followed by normalize_table.
SteeringTable filter_and_normalize(const SteeringTable& table, freq::Band band, double cutoff_rho,
                                   double attenuation_gamma);

// alpha * s~ for every layer (or only `layers` when nonempty) at timestep t.
InjectionHook make_injection_hook(const SteeringTable& table, double alpha, std::size_t d_model,
                                  const std::vector<std::size_t>& layers = {});

TensorArchive steering_to_archive(const SteeringTable& table);
SteeringTable steering_from_archive(const TensorArchive& archive);

}  // namespace ditmem
