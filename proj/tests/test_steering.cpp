#include <cmath>

#include "doctest.h"
#include "ditmem/errors.hpp"
#include "ditmem/steering.hpp"

using namespace ditmem;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

Trace noisy_trace(const std::vector<double>& centre, double sigma, Rng& rng,
                  const std::vector<std::size_t>& ts, std::size_t layers) {
  Trace tr;
  for (std::size_t t : ts)
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<double> v = centre;
      for (double& x : v) x += sigma * rng.normal();
      tr[{t, l}] = std::move(v);
    }
  return tr;
}

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

TEST_CASE("difference of means") {
  const Trace p1 = {{{5, 0}, {1, 2}}}, p2 = {{{5, 0}, {3, 4}}}, n1 = {{{5, 0}, {1, 1}}};
  const auto table = compute_steering({p1, p2}, {n1});
  CHECK(table.vectors.at({5, 0}) == std::vector<double>{1, 2});
  CHECK(table.n_pos == 2);
  CHECK(table.n_neg == 1);
  CHECK_THROWS_AS(compute_steering({p1, Trace{{{6, 0}, {0, 0}}}}, {n1}), DataError);
}

TEST_CASE("planted direction is recovered") {
  Rng rng(11);
  const std::size_t d = 32;
  std::vector<double> u(d), base(d);
  for (auto& x : u) x = rng.normal();
  for (auto& x : base) x = rng.normal();
  double un = 0;
  for (double x : u) un += x * x;
  const double sigma = 0.1 * std::sqrt(un);
  std::vector<double> pos_centre = base;
  for (std::size_t i = 0; i < d; ++i) pos_centre[i] += u[i];
  const std::vector<std::size_t> ts = {0, 33, 66, 100};
  std::vector<Trace> pos, neg;
  for (int r = 0; r < 32; ++r) {
    pos.push_back(noisy_trace(pos_centre, sigma, rng, ts, 2));
    neg.push_back(noisy_trace(base, sigma, rng, ts, 2));
  }
  const auto table = compute_steering(pos, neg);
  for (const auto& [k, v] : table.vectors) CHECK(cosine(v, u) >= 0.9);
}

TEST_CASE("high band with zero attenuation removes a time-constant table") {
  SteeringTable table;
  for (std::size_t t : {0, 10, 20, 30, 40, 50})
    for (std::size_t l = 0; l < 3; ++l) table.vectors[{t, l}] = {0.3, -1.7, 2.5, 1e3};
  const auto filtered = filter_table(table, freq::Band::kHigh, 0.25, 0.0);
  for (const auto& [k, v] : filtered.vectors)
    for (double x : v) CHECK(std::abs(x) < 1e-8);
  const auto normed = normalize_table(filtered);
  CHECK(normed.zero_vectors == 18);
  const auto kept = filter_and_normalize(table, freq::Band::kLow, 0.25, 0.0);
  CHECK(kept.zero_vectors == 0);
  for (const auto& [k, v] : kept.vectors) CHECK(cosine(v, table.vectors.at(k)) == doctest::Approx(1.0));
}

TEST_CASE("normalized vectors have unit norm") {
  Rng rng(3);
  SteeringTable table;
  for (std::size_t t = 0; t < 7; ++t) {
    std::vector<double> v(5);
    for (auto& x : v) x = rng.normal();
    table.vectors[{t * 10, 0}] = v;
  }
  const auto out = filter_and_normalize(table, freq::Band::kLow, 0.25, 0.2);
  CHECK(out.normalized);
  CHECK(out.band == freq::Band::kLow);
  for (const auto& [k, v] : out.vectors) {
    double n = 0;
    for (double x : v) n += x * x;
    CHECK(std::sqrt(n) == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(filter_and_normalize(out, freq::Band::kLow, 0.25, 0.2), std::invalid_argument);
}

TEST_CASE("injection hook scales and rejects missing timesteps") {
  SteeringTable table;
  table.vectors[{10, 0}] = {1, 0};
  table.vectors[{10, 1}] = {0, 1};
  table.normalized = true;
  const auto hook = make_injection_hook(table, 2.5, 2, {1});
  const auto out = hook(10);
  REQUIRE(out.size() == 2);
  CHECK(out[0].empty());
  CHECK(out[1] == std::vector<double>{0, 2.5});
  CHECK_THROWS_AS(hook(11), DataError);
  CHECK_THROWS_AS(make_injection_hook(table, 1.0, 3), std::invalid_argument);
}

TEST_CASE("archive round trip") {
  SteeringTable table;
  table.vectors[{0, 0}] = {1, 2, 3};
  table.vectors[{5, 0}] = {4, 5, 6};
  table.vectors[{0, 1}] = {7, 8, 9};
  table.vectors[{5, 1}] = {0, 0, 0};
  table.filtered = true;
  table.normalized = true;
  table.band = freq::Band::kHigh;
  table.n_pos = 4;
  table.n_neg = 3;
  table.zero_vectors = 1;
  const auto back = steering_from_archive(steering_to_archive(table));
  CHECK(back.vectors == table.vectors);
  CHECK(back.band == table.band);
  CHECK(back.n_pos == 4);
  CHECK(back.zero_vectors == 1);
}

TEST_CASE("captured traces cover every sampled step and layer") {
  DitBackbone bb(tiny());
  const auto sched = build_schedule(1000, 1e-4, 0.02);
  CaptureSetup setup{&bb, &sched, 5, {4, 8, 8, 8}};
  const Trace tr = capture_run({"a disc moves left", 1}, setup);
  CHECK(tr.size() == 10);
  CHECK(tr.begin()->second.size() == 12);
  CaptureSetup other = setup;
  other.steps = 6;
  CHECK_THROWS_AS(capture_runs({{"a", 1}}, {{"b", 1}}, setup, other), std::invalid_argument);
}
