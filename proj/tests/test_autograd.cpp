#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ditmem/freq_filter.hpp"
#include "ditmem/rng.hpp"

using namespace ditmem;
using ditmem::testing::gradcheck;

namespace {

Var rand_leaf(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  rng.fill_normal(t.data());
  t *= scale;
  return Var::leaf(std::move(t), true);
}

// Fixed random projection so every output element reaches the loss with a
// distinct weight.
Var project(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape());
  rng.fill_normal(w.data());
  return ag::sum(ag::mul(y, Var::constant(std::move(w))));
}

}  // namespace

TEST_CASE("elementwise and broadcasting ops") {
  Rng rng(1);
  std::vector<Var> v = {rand_leaf({3, 4}, rng), rand_leaf({3, 4}, rng), rand_leaf({1, 4}, rng),
                        rand_leaf({1, 4}, rng)};
  auto f = [&] {
    Var y = ag::add(ag::mul(v[0], v[1]), ag::scale(ag::sub(v[0], v[1]), 0.5));
    y = ag::modulate(ag::add_rows(y, v[2]), v[3], v[2]);
    y = ag::mul_rows(ag::add_scalar(y, 0.3), v[3]);
    return project(y, 2);
  };
  CHECK(gradcheck(v, f).max_rel < 1e-6);
}

TEST_CASE("nonlinearities") {
  Rng rng(2);
  std::vector<Var> v = {rand_leaf({4, 5}, rng)};
  CHECK(gradcheck(v, [&] { return project(ag::gelu(v[0]), 3); }).max_rel < 1e-6);
  CHECK(gradcheck(v, [&] { return project(ag::silu(v[0]), 4); }).max_rel < 1e-6);
  CHECK(gradcheck(v, [&] { return project(ag::relu(v[0]), 5); }).max_rel < 1e-6);
  CHECK(gradcheck(v, [&] { return project(ag::layer_norm(v[0]), 6); }).max_rel < 1e-5);
}

TEST_CASE("linear, attention and row plumbing") {
  Rng rng(3);
  std::vector<Var> v = {rand_leaf({5, 8}, rng), rand_leaf({8, 8}, rng, 0.3),
                        rand_leaf({1, 8}, rng), rand_leaf({3, 8}, rng)};
  auto f = [&] {
    const Var q = ag::linear(v[0], v[1], v[2]);
    const Var parts[] = {v[0], v[3]};
    const Var kv = ag::concat_rows(parts);
    Var out = ag::attention(q, kv, kv, 2);
    out = ag::slice_rows(out, 1, 3);
    return project(ag::reshape(out, {24}), 7);
  };
  CHECK(gradcheck(v, f).max_rel < 1e-5);
}

TEST_CASE("gather scatters repeated indices") {
  Rng rng(4);
  std::vector<Var> v = {rand_leaf({6}, rng)};
  auto f = [&] { return project(ag::gather(v[0], {0, 0, 5, 2, 2, 2}, {2, 3}), 8); };
  CHECK(gradcheck(v, f).max_rel < 1e-8);
}

TEST_CASE("conv3d") {
  Rng rng(5);
  std::vector<Var> v = {rand_leaf({2, 2, 4, 4, 4}, rng), rand_leaf({3, 2, 3, 3, 3}, rng, 0.3),
                        rand_leaf({3}, rng)};
  CHECK(gradcheck(v, [&] { return project(ag::conv3d(v[0], v[1], v[2]), 9); }).max_rel < 1e-6);
}

TEST_CASE("max pooling") {
  Rng rng(6);
  std::vector<Var> v = {rand_leaf({2, 3, 4, 5, 4}, rng)};
  CHECK(gradcheck(v, [&] { return project(ag::max_pool3d(v[0], 2, 2, 2), 10); }).max_rel < 1e-6);
}

TEST_CASE("batch norm with batch statistics") {
  Rng rng(7);
  std::vector<Var> v = {rand_leaf({2, 3, 2, 3, 3}, rng), rand_leaf({3}, rng), rand_leaf({3}, rng)};
  const std::vector<double> rm(3, 0.0), rv(3, 1.0);
  auto f = [&] { return project(ag::batch_norm(v[0], v[1], v[2], true, rm, rv, 1e-5, nullptr), 11); };
  CHECK(gradcheck(v, f).max_rel < 1e-5);
  auto g = [&] { return project(ag::batch_norm(v[0], v[1], v[2], false, rm, rv, 1e-5, nullptr), 12); };
  CHECK(gradcheck(v, g).max_rel < 1e-6);
}

TEST_CASE("spectral filter is differentiable") {
  Rng rng(6);
  std::vector<Var> v = {rand_leaf({2, 3, 4, 4, 4}, rng)};
  const auto m = freq::build_mask({4, 4, 4}, freq::Band::kHigh, 0.25, 0.2);
  CHECK(gradcheck(v, [&] { return project(ag::spectral_filter(v[0], m, true), 10); }).max_rel < 1e-6);
  const auto m2 = freq::build_mask({6}, freq::Band::kLow, 0.25, 0.2);
  std::vector<Var> w = {rand_leaf({6, 3}, rng)};
  CHECK(gradcheck(w, [&] { return project(ag::spectral_filter(w[0], m2, false), 11); }).max_rel < 1e-6);
}

TEST_CASE("mse against a constant target") {
  Rng rng(7);
  std::vector<Var> v = {rand_leaf({3, 3}, rng)};
  Tensor target({3, 3});
  rng.fill_normal(target.data());
  CHECK(gradcheck(v, [&] { return ag::mse(v[0], target); }).max_rel < 1e-6);
  CHECK(gradcheck(v, [&] { return ag::mean(ag::mul(v[0], v[0])); }).max_rel < 1e-6);
}

TEST_CASE("constants record no tape") {
  const Var a = Var::constant(Tensor({2}, 1.0));
  const Var b = Var::leaf(Tensor({2}, 2.0), false);
  const Var c = ag::mul(a, b);
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->parents.empty());
}

TEST_CASE("gradients accumulate across backward calls") {
  Var x = Var::leaf(Tensor({1}, 3.0), true);
  backward(ag::sum(ag::mul(x, x)));
  backward(ag::sum(ag::mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}
