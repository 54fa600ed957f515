#include "ditmem/freq_filter.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <stdexcept>

#include "ditmem/errors.hpp"

namespace ditmem::freq {

namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftLayout {
  std::vector<fftw_iodim> dims;
  fftw_iodim batch{};
  std::size_t grid_size = 1;
  std::size_t stride_to_bin_div = 1;  // element index -> bin index mapping
  bool fft_on_leading_axis = false;
};

FftLayout layout_for(const Tensor& x) {
  FftLayout l;
  if (x.rank() == 2) {
    const int t = static_cast<int>(x.dim(0));
    const int d = static_cast<int>(x.dim(1));
    l.dims.push_back({t, d, d});
    l.batch = {d, 1, 1};
    l.grid_size = x.dim(0);
    l.stride_to_bin_div = x.dim(1);
    l.fft_on_leading_axis = true;
  } else if (x.rank() == 4 || x.rank() == 5) {
    const std::size_t r = x.rank();
    const int dd = static_cast<int>(x.dim(r - 3));
    const int hh = static_cast<int>(x.dim(r - 2));
    const int ww = static_cast<int>(x.dim(r - 1));
    l.dims.push_back({dd, hh * ww, hh * ww});
    l.dims.push_back({hh, ww, ww});
    l.dims.push_back({ww, 1, 1});
    l.grid_size = static_cast<std::size_t>(dd) * hh * ww;
    l.batch = {static_cast<int>(x.numel() / l.grid_size), static_cast<int>(l.grid_size),
               static_cast<int>(l.grid_size)};
  } else {
    throw std::invalid_argument("feature tensor must be rank 2, 4 or 5, got " +
                                shape_to_string(x.shape()));
  }
  return l;
}

std::size_t bin_of(const FftLayout& l, std::size_t element) {
  return l.fft_on_leading_axis ? element / l.stride_to_bin_div : element % l.grid_size;
}

class FftBuffer {
 public:
  explicit FftBuffer(std::size_t n)
      : n_(n), data_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * std::max<std::size_t>(n, 1)))) {
    if (!data_) throw std::bad_alloc();
  }
  ~FftBuffer() { fftw_free(data_); }
  FftBuffer(const FftBuffer&) = delete;
  FftBuffer& operator=(const FftBuffer&) = delete;
  fftw_complex* get() { return data_; }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  fftw_complex* data_;
};

void run_fft(const FftLayout& l, FftBuffer& buf, int sign) {
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_guru_dft(static_cast<int>(l.dims.size()), l.dims.data(), 1, &l.batch,
                              buf.get(), buf.get(), sign, FFTW_ESTIMATE);
  }
  if (!plan) throw std::runtime_error("fftw planning failed");
  fftw_execute_dft(plan, buf.get(), buf.get());
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plan);
}

void check_finite(const Tensor& x) {
  if (!x.all_finite()) throw NumericError("feature tensor contains non-finite values");
}

void check_mask(const Tensor& x, const FrequencyMask& mask) {
  const Shape grid = fft_grid(x);
  if (grid != mask.grid_shape) {
    throw DataError("mask grid " + shape_to_string(mask.grid_shape) +
                    " does not match tensor FFT axes " + shape_to_string(grid));
  }
  if (mask.values.size() != shape_numel(grid)) throw DataError("mask has wrong number of bins");
}

// exp(sign * 2*pi*i * r / n), exact at quarter turns.
std::complex<double> twiddle(std::size_t r, std::size_t n, int sign) {
  r %= n;
  if (r == 0) return {1.0, 0.0};
  if (4 * r == n) return {0.0, static_cast<double>(sign)};
  if (2 * r == n) return {-1.0, 0.0};
  if (4 * r == 3 * n) return {0.0, -static_cast<double>(sign)};
  const double angle = sign * 2.0 * M_PI * static_cast<double>(r) / static_cast<double>(n);
  return {std::cos(angle), std::sin(angle)};
}

}  // namespace

std::string_view band_name(Band band) { return band == Band::kLow ? "low" : "high"; }

Band parse_band(std::string_view name) {
  if (name == "low" || name == "LOW") return Band::kLow;
  if (name == "high" || name == "HIGH") return Band::kHigh;
  throw std::invalid_argument("unknown band '" + std::string(name) + "' (expected low|high)");
}

bool is_low_bin(const Shape& grid_shape, std::span<const std::size_t> index, double cutoff_rho) {
  double nu_max = 0.0;
  for (std::size_t a = 0; a < grid_shape.size(); ++a) {
    const std::size_t n = grid_shape[a];
    const std::size_t half = n / 2;
    if (half == 0) continue;
    const std::size_t k = index[a];
    const double nu = static_cast<double>(std::min(k, n - k)) / static_cast<double>(half);
    nu_max = std::max(nu_max, nu);
  }
  return nu_max <= cutoff_rho;
}

FrequencyMask build_mask(const Shape& grid_shape, Band band, double cutoff_rho,
                         double attenuation_gamma) {
  if (grid_shape.empty()) throw std::invalid_argument("mask grid shape is empty");
  for (auto n : grid_shape) {
    if (n < 1) throw std::invalid_argument("mask axis length must be >= 1");
  }
  if (!(cutoff_rho > 0.0 && cutoff_rho < 1.0)) {
    throw std::invalid_argument("cutoff_rho must lie in (0,1)");
  }
  if (!(attenuation_gamma >= 0.0 && attenuation_gamma <= 1.0)) {
    throw std::invalid_argument("attenuation_gamma must lie in [0,1]");
  }
  FrequencyMask mask{band, cutoff_rho, attenuation_gamma, grid_shape, {}};
  const std::size_t total = shape_numel(grid_shape);
  mask.values.resize(total);
  std::vector<std::size_t> idx(grid_shape.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    const bool low = is_low_bin(grid_shape, idx, cutoff_rho);
    const bool pass = (band == Band::kLow) == low;
    mask.values[flat] = pass ? 1.0 : attenuation_gamma;
    for (std::size_t a = grid_shape.size(); a-- > 0;) {
      if (++idx[a] < grid_shape[a]) break;
      idx[a] = 0;
    }
  }
  return mask;
}

Shape fft_grid(const Tensor& x) {
  switch (x.rank()) {
    case 2:
      return {x.dim(0)};
    case 4:
      return {x.dim(1), x.dim(2), x.dim(3)};
    case 5:
      return {x.dim(2), x.dim(3), x.dim(4)};
    default:
      throw std::invalid_argument("feature tensor must be rank 2, 4 or 5, got " +
                                  shape_to_string(x.shape()));
  }
}

std::vector<std::complex<double>> fft_forward(const Tensor& x) {
  check_finite(x);
  const FftLayout l = layout_for(x);
  FftBuffer buf(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    buf.get()[i][0] = x[i];
    buf.get()[i][1] = 0.0;
  }
  if (x.numel() > 0) run_fft(l, buf, FFTW_FORWARD);
  std::vector<std::complex<double>> out(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = {buf.get()[i][0], buf.get()[i][1]};
  return out;
}

Tensor apply_filter(const Tensor& x, const FrequencyMask& mask, bool residual,
                    FilterDiagnostics* diagnostics) {
  check_mask(x, mask);
  check_finite(x);
  const FftLayout l = layout_for(x);
  const std::size_t n = x.numel();
  FftBuffer buf(n);
  for (std::size_t i = 0; i < n; ++i) {
    buf.get()[i][0] = x[i];
    buf.get()[i][1] = 0.0;
  }
  Tensor out(x.shape());
  if (n == 0) return out;
  // An all-pass mask is the identity; skip the transform round trip.
  if (std::all_of(mask.values.begin(), mask.values.end(), [](double v) { return v == 1.0; })) {
    out = x;
    if (diagnostics) diagnostics->max_imag = 0.0;
    if (residual) out += x;
    return out;
  }
  run_fft(l, buf, FFTW_FORWARD);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mask.values[bin_of(l, i)];
    buf.get()[i][0] *= m;
    buf.get()[i][1] *= m;
  }
  run_fft(l, buf, FFTW_BACKWARD);
  const double inv_n = 1.0 / static_cast<double>(l.grid_size);
  double max_imag = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = buf.get()[i][0] * inv_n;
    max_imag = std::max(max_imag, std::abs(buf.get()[i][1] * inv_n));
  }
  const double scale = x.max_abs();
  if (max_imag > 1e-5 * scale + 1e-300) {
    throw NumericError("imaginary residue " + std::to_string(max_imag) +
                       " after inverse FFT; mask is not conjugate symmetric");
  }
  if (diagnostics) diagnostics->max_imag = max_imag;
  if (residual) out += x;
  return out;
}

Tensor naive_dft_oracle(const Tensor& x, const FrequencyMask& mask, bool residual) {
  if (x.numel() > kOracleMaxElements) {
    throw std::invalid_argument("naive DFT oracle limited to 4096 elements");
  }
  check_mask(x, mask);
  check_finite(x);

  // View x as [outer, grid..., inner] where inner is the non-FFT trailing stride.
  const Shape grid = mask.grid_shape;
  std::size_t inner = 1;
  if (x.rank() == 2) inner = x.dim(1);
  const std::size_t gsize = shape_numel(grid);

  std::vector<std::complex<double>> a(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) a[i] = {x[i], 0.0};

  auto transform_axis = [&](std::size_t axis, int sign) {
    std::size_t stride = inner;
    for (std::size_t b = axis + 1; b < grid.size(); ++b) stride *= grid[b];
    const std::size_t len = grid[axis];
    const std::size_t block = stride * len;
    std::vector<std::complex<double>> line(len), res(len);
    for (std::size_t o = 0; o < a.size() / len; ++o) {
      const std::size_t base_block = o / stride;
      const std::size_t offset = o % stride;
      const std::size_t base = base_block * block + offset;
      for (std::size_t k = 0; k < len; ++k) line[k] = a[base + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        std::complex<double> acc{0.0, 0.0};
        for (std::size_t m = 0; m < len; ++m) acc += line[m] * twiddle(k * m, len, sign);
        res[k] = acc;
      }
      for (std::size_t k = 0; k < len; ++k) a[base + k * stride] = res[k];
    }
  };

  for (std::size_t axis = 0; axis < grid.size(); ++axis) transform_axis(axis, -1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t bin = (i / inner) % gsize;
    a[i] *= mask.values[bin];
  }
  for (std::size_t axis = 0; axis < grid.size(); ++axis) transform_axis(axis, +1);

  Tensor out(x.shape());
  const double inv_n = 1.0 / static_cast<double>(gsize);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].real() * inv_n;
  if (residual) out += x;
  return out;
}

}  // namespace ditmem::freq
