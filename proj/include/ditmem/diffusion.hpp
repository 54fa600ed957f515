#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "ditmem/autograd.hpp"
#include "ditmem/dit_backbone.hpp"
#include "ditmem/nn.hpp"
#include "ditmem/rng.hpp"

namespace ditmem {

struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;
};

NoiseSchedule build_schedule(std::size_t T, double beta_start, double beta_end);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched);

// eps prediction for training item i at noised input x_t and timestep t.
using DenoiserFn = std::function<Var(std::size_t item, const Tensor& x_t, std::size_t t)>;

struct StepResult {
  double loss = 0.0;
  std::vector<std::size_t> timesteps;
};

// One optimizer update on mean_i ||eps_i - eps_theta(x_t,i)||^2 over the
// batch. Timesteps and noise come from `rng`; only `trainable` is updated.
StepResult training_step(const std::vector<const Tensor*>& x0, const DenoiserFn& denoiser,
                         const NoiseSchedule& sched, Rng& rng,
                         std::vector<Parameter*>& trainable, Adam& optimizer);

// Fixed (t, eps) draws per item so losses are comparable across training.
struct EvalDraw {
  std::size_t t = 0;
  Tensor eps;
};
std::vector<EvalDraw> make_eval_draws(const std::vector<const Tensor*>& x0,
                                      const NoiseSchedule& sched, Rng rng);
double evaluate_loss(const std::vector<const Tensor*>& x0, const std::vector<EvalDraw>& draws,
                     const DenoiserFn& denoiser, const NoiseSchedule& sched);

// Returns the per-layer steering vectors to add at (timestep t); an empty
// result disables injection for that step.
using InjectionHook = std::function<std::vector<std::vector<double>>(std::size_t t)>;
// Receives (step index, timestep, layer, cross-attention output [N, d]).
using CaptureFn =
    std::function<void(std::size_t step, std::size_t t, std::size_t layer, const Tensor&)>;

struct SamplerPlan {
  std::vector<std::size_t> steps;  // strictly decreasing timesteps
  std::size_t inject_cutoff = 0;   // injection on step indices [0, inject_cutoff)
  const Tensor* memory = nullptr;  // [N_mem, d] memory tokens, optional
  InjectionHook steering;          // optional
  CaptureFn capture;               // optional
};

// Evenly strided DDIM steps floor(i*T/n), descending, with the two-thirds
// injection cutoff.
SamplerPlan make_plan(const NoiseSchedule& sched, std::size_t n_steps);
std::size_t injection_cutoff(std::size_t n_steps);

// Deterministic DDIM (eta = 0) from a seeded Gaussian x_T of shape latent_shape.
Tensor sample(const SamplerPlan& plan, const DitBackbone& backbone, const NoiseSchedule& sched,
              const Tensor& cond, const Shape& latent_shape, std::uint64_t seed);

}  // namespace ditmem
