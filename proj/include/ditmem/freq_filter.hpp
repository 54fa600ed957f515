#pragma once

#include <complex>
#include <string_view>
#include <vector>

#include "ditmem/tensor.hpp"

namespace ditmem::freq {

enum class Band { kLow, kHigh };

std::string_view band_name(Band band);
Band parse_band(std::string_view name);

// Multiplicative spectral mask over the FFT axes of a feature tensor. Every
// bin holds either 1.0 (pass band) or attenuation_gamma (attenuated band).
struct FrequencyMask {
  Band band = Band::kLow;
  double cutoff_rho = 0.25;
  double attenuation_gamma = 0.2;
  Shape grid_shape;
  std::vector<double> values;  // row-major over grid_shape

  std::size_t bins() const { return values.size(); }
};

// Bin classification: per-axis normalized frequency nu = min(k, n-k) / floor(n/2)
// (0 for n == 1). A bin is low-band iff max over axes of nu <= cutoff_rho.
FrequencyMask build_mask(const Shape& grid_shape, Band band, double cutoff_rho,
                         double attenuation_gamma);

bool is_low_bin(const Shape& grid_shape, std::span<const std::size_t> index, double cutoff_rho);

// Shape of the FFT axes for a feature tensor:
//   rank 2 [T, d]          -> {T}
//   rank 4 [C, D, H, W]    -> {D, H, W}
//   rank 5 [B, C, D, H, W] -> {D, H, W}   (batched spatiotemporal features)
Shape fft_grid(const Tensor& x);

struct FilterDiagnostics {
  double max_imag = 0.0;  // largest |imag| before the real-part projection
};

// out = Re(IFFT(FFT(x) * mask)) (+ x if residual). Forward transform is
// unnormalized; inverse carries the 1/N factor.
Tensor apply_filter(const Tensor& x, const FrequencyMask& mask, bool residual,
                    FilterDiagnostics* diagnostics = nullptr);

// Unnormalized forward spectrum over the FFT axes, laid out like x.
std::vector<std::complex<double>> fft_forward(const Tensor& x);

// Reference implementation by explicit DFT summation, one axis at a time.
// Limited to 4096 elements.
Tensor naive_dft_oracle(const Tensor& x, const FrequencyMask& mask, bool residual);

inline constexpr std::size_t kOracleMaxElements = 4096;

}  // namespace ditmem::freq
