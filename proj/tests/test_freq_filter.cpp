#include <cmath>
#include <complex>
#include <stdexcept>

#include "doctest.h"
#include "ditmem/errors.hpp"
#include "ditmem/freq_filter.hpp"
#include "ditmem/rng.hpp"

using namespace ditmem;
using namespace ditmem::freq;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  rng.fill_normal(t.data());
  return t;
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("low mask on an 8-bin axis") {
  const auto m = build_mask({8}, Band::kLow, 0.25, 0.2);
  const std::vector<double> expected = {1, 1, 0.2, 0.2, 0.2, 0.2, 0.2, 1};
  CHECK(m.values == expected);
}

TEST_CASE("unit attenuation gives an all-pass mask") {
  for (Band b : {Band::kLow, Band::kHigh}) {
    const auto m = build_mask({3, 5, 4}, b, 0.4, 1.0);
    for (double v : m.values) CHECK(v == 1.0);
  }
}

TEST_CASE("mask identities over axis lengths 1 to 9") {
  const double gamma = 0.2;
  for (std::size_t a = 1; a <= 9; ++a)
    for (std::size_t b = 1; b <= 9; b += 2) {
      const Shape g = {a, b};
      const auto lo = build_mask(g, Band::kLow, 0.3, gamma);
      const auto hi = build_mask(g, Band::kHigh, 0.3, gamma);
      CHECK(lo.values[0] == 1.0);
      for (std::size_t i = 0; i < lo.bins(); ++i) {
        CHECK(lo.values[i] + hi.values[i] == 1.0 + gamma);
        CHECK((lo.values[i] == 1.0 || lo.values[i] == gamma));
        const std::size_t k0 = i / b, k1 = i % b;
        const std::size_t mirror = ((a - k0) % a) * b + (b - k1) % b;
        CHECK(lo.values[i] == lo.values[mirror]);
      }
    }
}

TEST_CASE("mask arguments are validated") {
  CHECK_THROWS_AS(build_mask({}, Band::kLow, 0.25, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(build_mask({4}, Band::kLow, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(build_mask({4}, Band::kLow, 1.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(build_mask({4}, Band::kHigh, 0.5, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(build_mask({0}, Band::kHigh, 0.5, 0.5), std::invalid_argument);
}

TEST_CASE("impulse through a low-pass 4-bin filter") {
  // Spectrum of the impulse is flat; only bin 0 passes at full weight.
  const Tensor x({4, 1}, {1, 0, 0, 0});
  const auto m = build_mask({4}, Band::kLow, 0.25, 0.2);
  const Tensor y = apply_filter(x, m, false);
  const Tensor o = naive_dft_oracle(x, m, false);
  const std::vector<double> expected = {0.4, 0.2, 0.2, 0.2};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-15));
    CHECK(std::abs(y[i] - o[i]) <= 1e-15);
  }
}

TEST_CASE("all-pass filter round trips and doubles with residual") {
  Rng rng(5);
  const Tensor x = random_tensor({3, 4, 5, 6}, rng);
  const auto m = build_mask({4, 5, 6}, Band::kHigh, 0.5, 1.0);
  CHECK(bit_identical(apply_filter(x, m, false), x));
  Tensor twice = x;
  twice += x;
  CHECK(bit_identical(apply_filter(x, m, true), twice));
  // Just below all-pass the transform path runs and stays close.
  const auto near = build_mask({4, 5, 6}, Band::kHigh, 0.5, 1.0 - 1e-12);
  CHECK(max_diff(apply_filter(x, near, false), x) <= 1e-11);
}

TEST_CASE("FFT filter agrees with the naive DFT") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({2, 4, 4, 4}, rng);
    const Band band = trial % 2 ? Band::kHigh : Band::kLow;
    const auto m = build_mask({4, 4, 4}, band, 0.5, 0.2);
    CHECK(max_diff(apply_filter(x, m, trial % 3 == 0), naive_dft_oracle(x, m, trial % 3 == 0)) <= 1e-10);
  }
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({8, 3}, rng);
    const auto m = build_mask({8}, Band::kHigh, 0.25, 0.2);
    CHECK(max_diff(apply_filter(x, m, false), naive_dft_oracle(x, m, false)) <= 1e-10);
  }
}

TEST_CASE("oracle on zeros and size limit") {
  const auto m = build_mask({4}, Band::kLow, 0.25, 0.2);
  const Tensor z({4, 1});
  CHECK(naive_dft_oracle(z, m, false) == z);
  const Tensor big({5000, 1});
  CHECK_THROWS(naive_dft_oracle(big, build_mask({5000}, Band::kLow, 0.25, 0.2), false));
}

TEST_CASE("linearity without residual") {
  Rng rng(3);
  const Tensor x = random_tensor({2, 6, 5, 3}, rng), y = random_tensor({2, 6, 5, 3}, rng);
  const auto m = build_mask({6, 5, 3}, Band::kLow, 0.35, 0.2);
  const Tensor lhs = apply_filter(1.5 * x + (-0.75) * y, m, false);
  const Tensor rhs = 1.5 * apply_filter(x, m, false) + (-0.75) * apply_filter(y, m, false);
  CHECK(max_diff(lhs, rhs) <= 1e-12 * std::max(1.0, rhs.max_abs()));
}

TEST_CASE("real inputs leave negligible imaginary residue") {
  Rng rng(8);
  for (std::size_t n = 1; n <= 9; ++n) {
    const Tensor x = random_tensor({1, n, 9 - n + 1, 4}, rng);
    const auto m = build_mask({n, 9 - n + 1, 4}, Band::kHigh, 0.3, 0.2);
    FilterDiagnostics diag;
    apply_filter(x, m, false, &diag);
    CHECK(diag.max_imag <= 1e-5 * x.max_abs());
  }
}

TEST_CASE("bands split the energy of a spectrum") {
  // M_low + M_high = 1 + gamma, so the two filtered outputs add to (1 + gamma) x.
  Rng rng(23);
  const Tensor x = random_tensor({16, 4}, rng);
  const auto lo = build_mask({16}, Band::kLow, 0.25, 0.2);
  const auto hi = build_mask({16}, Band::kHigh, 0.25, 0.2);
  const Tensor s = apply_filter(x, lo, false) + apply_filter(x, hi, false);
  CHECK(max_diff(s, 1.2 * x) <= 1e-12);
}

TEST_CASE("filter rejects mismatched and non-finite inputs") {
  const auto m = build_mask({4}, Band::kLow, 0.25, 0.2);
  CHECK_THROWS_AS(apply_filter(Tensor({5, 2}), m, false), DataError);
  Tensor bad({4, 1});
  bad[2] = std::nan("");
  CHECK_THROWS_AS(apply_filter(bad, m, false), NumericError);
}

TEST_CASE("forward spectrum of a constant concentrates at DC") {
  const Tensor x({4, 1}, 1.0);
  const auto spec = fft_forward(x);
  CHECK(spec[0].real() == doctest::Approx(4.0));
  for (std::size_t i = 1; i < 4; ++i) CHECK(std::abs(spec[i]) <= 1e-12);
}
