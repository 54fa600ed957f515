#include "ditmem/diffusion.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ditmem/errors.hpp"

namespace ditmem {

NoiseSchedule build_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - s.betas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t >= sched.T) throw std::out_of_range("timestep " + std::to_string(t) + " out of range");
  if (x0.shape() != eps.shape()) throw DataError("q_sample: eps shape differs from x0");
  const double a = std::sqrt(sched.alpha_bars[t]), b = std::sqrt(1.0 - sched.alpha_bars[t]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

StepResult training_step(const std::vector<const Tensor*>& x0, const DenoiserFn& denoiser,
                         const NoiseSchedule& sched, Rng& rng,
                         std::vector<Parameter*>& trainable, Adam& optimizer) {
  if (x0.empty()) throw std::invalid_argument("training_step needs a nonempty batch");
  StepResult res;
  Var total;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const std::size_t t = static_cast<std::size_t>(rng.uniform_int(sched.T));
    Tensor eps(x0[i]->shape());
    rng.fill_normal(eps.storage());
    const Var pred = denoiser(i, q_sample(*x0[i], t, eps, sched), t);
    const Var li = ag::mse(pred, eps);
    total = total.defined() ? ag::add(total, li) : li;
    res.timesteps.push_back(t);
  }
  total = ag::scale(total, 1.0 / static_cast<double>(x0.size()));
  res.loss = total.value()[0];
  if (!std::isfinite(res.loss)) {
    std::ostringstream msg;
    msg << "non-finite training loss at optimizer step " << optimizer.steps_taken() + 1
        << " (timesteps";
    for (auto t : res.timesteps) msg << ' ' << t;
    msg << ')';
    throw NumericError(msg.str());
  }
  backward(total);
  optimizer.step(trainable);
  for (auto* prm : trainable) prm->var.zero_grad();
  return res;
}

std::vector<EvalDraw> make_eval_draws(const std::vector<const Tensor*>& x0,
                                      const NoiseSchedule& sched, Rng rng) {
  std::vector<EvalDraw> draws;
  for (const auto* x : x0) {
    EvalDraw d;
    d.t = static_cast<std::size_t>(rng.uniform_int(sched.T));
    d.eps = Tensor(x->shape());
    rng.fill_normal(d.eps.storage());
    draws.push_back(std::move(d));
  }
  return draws;
}

double evaluate_loss(const std::vector<const Tensor*>& x0, const std::vector<EvalDraw>& draws,
                     const DenoiserFn& denoiser, const NoiseSchedule& sched) {
  if (x0.size() != draws.size() || x0.empty()) {
    throw std::invalid_argument("evaluate_loss: one draw per item required");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const Var pred = denoiser(i, q_sample(*x0[i], draws[i].t, draws[i].eps, sched), draws[i].t);
    total += ag::mse(Var::constant(pred.value()), draws[i].eps).value()[0];
  }
  return total / static_cast<double>(x0.size());
}

std::size_t injection_cutoff(std::size_t n_steps) { return (2 * n_steps + 2) / 3; }

SamplerPlan make_plan(const NoiseSchedule& sched, std::size_t n_steps) {
  if (n_steps < 1 || n_steps > sched.T) {
    throw std::invalid_argument("sampler steps must lie in [1, T]");
  }
  SamplerPlan plan;
  for (std::size_t i = n_steps; i-- > 0;) plan.steps.push_back(i * sched.T / n_steps);
  plan.inject_cutoff = injection_cutoff(n_steps);
  return plan;
}

Tensor sample(const SamplerPlan& plan, const DitBackbone& backbone, const NoiseSchedule& sched,
              const Tensor& cond, const Shape& latent_shape, std::uint64_t seed) {
  if (plan.steps.empty()) throw std::invalid_argument("sampler plan has no steps");
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    if (plan.steps[i] >= sched.T || (i > 0 && plan.steps[i] >= plan.steps[i - 1])) {
      throw std::invalid_argument("sampler steps must be strictly decreasing and < T");
    }
  }
  Rng rng = Rng(seed).split("sample-init");
  Tensor x(latent_shape);
  rng.fill_normal(x.storage());

  Var mem;
  if (plan.memory && plan.memory->numel() > 0) mem = Var::constant(*plan.memory);

  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const std::size_t t = plan.steps[i];
    CrossAttnHooks hooks;
    std::vector<std::vector<double>> inject;
    if (plan.steering && i < plan.inject_cutoff) {
      inject = plan.steering(t);
      hooks.inject = &inject;
    }
    if (plan.capture) {
      hooks.tap = [&, i, t](std::size_t layer, const Tensor& out) { plan.capture(i, t, layer, out); };
    }
    const Tensor eps =
        backbone.forward_denoiser(x, t, cond, mem.defined() ? &mem : nullptr, &hooks).value();
    const double ab = sched.alpha_bars[t];
    const double ab_prev = i + 1 < plan.steps.size() ? sched.alpha_bars[plan.steps[i + 1]] : 1.0;
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double sap = std::sqrt(ab_prev), sbp = std::sqrt(1.0 - ab_prev);
    for (std::size_t e = 0; e < x.numel(); ++e) {
      const double x0 = (x[e] - sb * eps[e]) / sa;
      x[e] = sap * x0 + sbp * eps[e];
    }
    if (!x.all_finite()) {
      throw NumericError("sampler diverged at step " + std::to_string(i) + " (t=" +
                         std::to_string(t) + ")");
    }
  }
  return x;
}

}  // namespace ditmem
