#include "png_image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ditmem/errors.hpp"

namespace ditmem::tools {

Image::Image(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> fill)
    : width(w), height(h), rgb(w * h * 3) {
  for (std::size_t i = 0; i < w * h; ++i) std::copy(fill.begin(), fill.end(), rgb.begin() + 3 * i);
}

void Image::set(long x, long y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) return;
  std::copy(c.begin(), c.end(), rgb.begin() + 3 * (static_cast<std::size_t>(y) * width + x));
}

void Image::line(double x0, double y0, double x1, double y1, std::array<std::uint8_t, 3> c) {
  const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int n = std::max(1, static_cast<int>(std::ceil(len)));
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    set(std::lround(x0 + t * (x1 - x0)), std::lround(y0 + t * (y1 - y0)), c);
  }
}

void write_png(const std::filesystem::path& path, const Image& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw DataError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.rgb.data() + 3 * y * img.width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image video_frame(const PixelVideo& v, std::size_t f) {
  const std::size_t F = v.data.dim(1), H = v.data.dim(2), W = v.data.dim(3);
  Image img(W, H);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double val = std::clamp(v.data[((c * F + f) * H + y) * W + x], 0.0, 1.0);
        img.rgb[3 * (y * W + x) + c] = static_cast<std::uint8_t>(std::lround(val * 255.0));
      }
  return img;
}

std::array<std::uint8_t, 3> series_color(std::size_t i) {
  static const std::array<std::array<std::uint8_t, 3>, 6> palette = {
      {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}, {255, 127, 14}, {23, 190, 207}}};
  return palette[i % palette.size()];
}

Image line_chart(const std::vector<Series>& series, std::size_t width, std::size_t height) {
  Image img(width, height);
  const double left = 40, right = static_cast<double>(width) - 15, top = 15,
               bottom = static_cast<double>(height) - 30;
  std::size_t n_max = 1;
  bool positive = true;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    n_max = std::max(n_max, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      positive = positive && v > 0;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(lo <= hi)) lo = 0, hi = 1;
  auto ty = [&](double v) { return positive ? std::log10(v) : v; };
  double ylo = ty(lo), yhi = ty(hi);
  if (yhi - ylo < 1e-12) ylo -= 0.5, yhi += 0.5;
  const std::array<std::uint8_t, 3> axis = {60, 60, 60}, grid = {225, 225, 225};
  for (int g = 1; g < 5; ++g) {
    const double y = top + (bottom - top) * g / 5.0;
    img.line(left, y, right, y, grid);
  }
  img.line(left, top, left, bottom, axis);
  img.line(left, bottom, right, bottom, axis);
  const double xs = n_max > 1 ? (right - left) / static_cast<double>(n_max - 1) : 0.0;
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& v = series[si].values;
    const auto col = series_color(si);
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (!std::isfinite(v[i - 1]) || !std::isfinite(v[i])) continue;
      const double y0 = bottom - (ty(v[i - 1]) - ylo) / (yhi - ylo) * (bottom - top);
      const double y1 = bottom - (ty(v[i]) - ylo) / (yhi - ylo) * (bottom - top);
      img.line(left + xs * static_cast<double>(i - 1), y0, left + xs * static_cast<double>(i), y1, col);
    }
    // Legend swatch per series along the bottom edge.
    for (int dx = 0; dx < 14; ++dx)
      for (int dy = 0; dy < 6; ++dy)
        img.set(static_cast<long>(left + 20 * static_cast<double>(si) + dx),
                static_cast<long>(bottom + 12 + dy), col);
  }
  return img;
}

Image bar_chart(const std::vector<double>& values, std::size_t width, std::size_t height) {
  Image img(width, height);
  const double left = 40, right = static_cast<double>(width) - 15, top = 15,
               bottom = static_cast<double>(height) - 30;
  double hi = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) hi = std::max(hi, v);
  }
  if (hi <= 0.0) hi = 1.0;
  const std::array<std::uint8_t, 3> axis = {60, 60, 60};
  const double slot = values.empty() ? 0.0 : (right - left) / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]) || values[i] <= 0.0) continue;
    const double x0 = left + slot * (static_cast<double>(i) + 0.15);
    const double x1 = left + slot * (static_cast<double>(i) + 0.85);
    const double y0 = bottom - values[i] / hi * (bottom - top);
    for (long x = std::lround(x0); x <= std::lround(x1); ++x)
      for (long y = std::lround(y0); y <= std::lround(bottom); ++y) img.set(x, y, series_color(i));
  }
  img.line(left, top, left, bottom, axis);
  img.line(left, bottom, right, bottom, axis);
  return img;
}

}  // namespace ditmem::tools
