#include <cmath>

#include "doctest.h"
#include "ditmem/diffusion.hpp"
#include "ditmem/errors.hpp"

using namespace ditmem;

namespace {

BackboneConfig tiny() {
  BackboneConfig c;
  c.n_blocks = 2;
  c.d_model = 12;
  c.n_heads = 2;
  c.cond_dim = 8;
  c.freq_dim = 8;
  return c;
}

}  // namespace

TEST_CASE("linear schedule cumulative products") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  CHECK(s.alpha_bars[0] == doctest::Approx(0.9999).epsilon(1e-14));
  CHECK(s.alpha_bars[499] == doctest::Approx(0.07858724288177824).epsilon(1e-12));
  CHECK(s.alpha_bars[999] == doctest::Approx(4.035829765375676e-05).epsilon(1e-10));
  for (std::size_t t = 1; t < 1000; ++t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
  CHECK_THROWS_AS(build_schedule(10, 0.5, 0.1), std::invalid_argument);
}

TEST_CASE("q_sample moments") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  const Tensor x0({20000}, 2.0);
  Tensor eps({20000});
  Rng rng(1);
  rng.fill_normal(eps.data());
  const std::size_t t = 300;
  const Tensor xt = q_sample(x0, t, eps, s);
  double mean = 0, sq = 0;
  for (double v : xt.data()) mean += v;
  mean /= 20000;
  for (double v : xt.data()) sq += (v - mean) * (v - mean);
  const double var = sq / 19999;
  const double ab = s.alpha_bars[t];
  CHECK(mean == doctest::Approx(2.0 * std::sqrt(ab)).epsilon(0.03));
  CHECK(var == doctest::Approx(1.0 - ab).epsilon(0.05));
  CHECK_THROWS_AS(q_sample(x0, 1000, eps, s), std::out_of_range);
}

TEST_CASE("zero predictor loss is the noise energy") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  std::vector<Tensor> data(8, Tensor({4, 4, 8, 8}, 0.3));
  std::vector<const Tensor*> x0;
  for (auto& d : data) x0.push_back(&d);
  Var w = Var::leaf(Tensor({1}, 0.0), true);
  std::vector<Parameter> params = {{"w", w}};
  std::vector<Parameter*> trainable = {&params[0]};
  Adam opt;
  Rng rng(2);
  const DenoiserFn zero = [&](std::size_t, const Tensor& xt, std::size_t) {
    return ag::gather(w, std::vector<std::size_t>(xt.numel(), 0), xt.shape());
  };
  const StepResult r = training_step(x0, zero, s, rng, trainable, opt);
  CHECK(r.loss == doctest::Approx(1.0).epsilon(0.05));
  CHECK(r.timesteps.size() == 8);
  CHECK(opt.steps_taken() == 1);
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("evaluation draws are fixed") {
  const auto s = build_schedule(100, 1e-4, 0.02);
  std::vector<Tensor> data(3, Tensor({2, 2}, 1.0));
  std::vector<const Tensor*> x0 = {&data[0], &data[1], &data[2]};
  const auto a = make_eval_draws(x0, s, Rng(5));
  const auto b = make_eval_draws(x0, s, Rng(5));
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].t == b[i].t);
    CHECK(bit_identical(a[i].eps, b[i].eps));
  }
  const DenoiserFn zero = [](std::size_t, const Tensor& xt, std::size_t) {
    return Var::constant(Tensor(xt.shape()));
  };
  double energy = 0;
  for (const auto& d : a)
    for (double e : d.eps.data()) energy += e * e / 4.0;
  CHECK(evaluate_loss(x0, a, zero, s) == doctest::Approx(energy / 3.0));
}

TEST_CASE("sampler plan strides and the two-thirds cutoff") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  const SamplerPlan p = make_plan(s, 30);
  REQUIRE(p.steps.size() == 30);
  CHECK(p.steps.front() == 966);
  CHECK(p.steps[1] == 933);
  CHECK(p.steps.back() == 0);
  CHECK(p.inject_cutoff == 20);
  for (std::size_t n = 1; n <= 100; ++n) {
    CHECK(injection_cutoff(n) == static_cast<std::size_t>(std::ceil(2.0 * n / 3.0)));
  }
}

TEST_CASE("DDIM sampling is deterministic and seed dependent") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  DitBackbone bb(tiny());
  const Tensor cond = bb.encode_text("a disc moves left");
  const SamplerPlan p = make_plan(s, 4);
  const Tensor a = sample(p, bb, s, cond, {4, 8, 8, 8}, 42);
  CHECK(a.all_finite());
  CHECK(bit_identical(sample(p, bb, s, cond, {4, 8, 8, 8}, 42), a));
  CHECK_FALSE(bit_identical(sample(p, bb, s, cond, {4, 8, 8, 8}, 43), a));
}

TEST_CASE("steering only acts on steps before the cutoff") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  DitBackbone bb(tiny());
  const Tensor cond = bb.encode_text("a ring");
  SamplerPlan p = make_plan(s, 6);
  std::vector<std::size_t> seen;
  p.steering = [&](std::size_t t) {
    seen.push_back(t);
    return std::vector<std::vector<double>>{};
  };
  std::size_t captures = 0;
  p.capture = [&](std::size_t, std::size_t, std::size_t, const Tensor&) { ++captures; };
  sample(p, bb, s, cond, {4, 8, 8, 8}, 1);
  CHECK(seen == std::vector<std::size_t>(p.steps.begin(), p.steps.begin() + 4));
  CHECK(captures == 12);
}
