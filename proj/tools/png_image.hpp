#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ditmem/latent_codec.hpp"

namespace ditmem::tools {

// 8-bit RGB raster.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> fill = {255, 255, 255});
  void set(long x, long y, std::array<std::uint8_t, 3> c);
  void line(double x0, double y0, double x1, double y1, std::array<std::uint8_t, 3> c);
};

void write_png(const std::filesystem::path& path, const Image& img);

// Frame f of a [3, F, H, W] video in [0, 1].
Image video_frame(const PixelVideo& v, std::size_t f);

struct Series {
  std::string name;
  std::vector<double> values;
};

// Line chart of one or more series over their index, log-scaled on y when
// every value is positive. No text is rendered; colors follow series order.
Image line_chart(const std::vector<Series>& series, std::size_t width = 640, std::size_t height = 400);

// Vertical bars from zero, one per value, colored by index.
Image bar_chart(const std::vector<double>& values, std::size_t width = 640, std::size_t height = 400);

std::array<std::uint8_t, 3> series_color(std::size_t i);

}  // namespace ditmem::tools
