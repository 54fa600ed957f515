#include "ditmem/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <set>

#include "ditmem/retrieval_bank.hpp"

namespace ditmem::synth {

namespace {

using Rgb = std::array<double, 3>;

const std::vector<Rgb>& color_values() {
  static const std::vector<Rgb> v = {{0.9, 0.1, 0.1}, {0.1, 0.8, 0.2}, {0.15, 0.3, 0.95},
                                     {0.95, 0.9, 0.1}, {0.6, 0.2, 0.8}, {0.1, 0.85, 0.85},
                                     {1.0, 0.55, 0.05}, {0.97, 0.97, 0.97}};
  return v;
}

const std::vector<Rgb>& background_values() {
  static const std::vector<Rgb> v = {{0.02, 0.02, 0.02}, {0.5, 0.5, 0.5}, {0.05, 0.07, 0.35},
                                     {0.35, 0.3, 0.12}};
  return v;
}

bool inside(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:  // square
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1:  // disc
      return dx * dx + dy * dy <= r * r;
    case 2: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    default:  // cross
      return (std::abs(dx) <= r && std::abs(dy) <= r / 3) ||
             (std::abs(dy) <= r && std::abs(dx) <= r / 3);
  }
}

std::string pad5(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

}  // namespace

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v = {"square", "disc", "ring", "cross"};
  return v;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v = {"red",    "green",  "blue",   "yellow",
                                             "purple", "cyan",   "orange", "white"};
  return v;
}

const std::vector<std::string>& background_names() {
  static const std::vector<std::string> v = {"black", "gray", "navy", "olive"};
  return v;
}

ClipSpec random_spec(Rng& rng, const VideoDims& dims) {
  ClipSpec s;
  s.shape = rng.uniform_int(shape_names().size());
  s.color = rng.uniform_int(color_names().size());
  s.background = rng.uniform_int(background_names().size());
  s.large = rng.uniform() < 0.5;
  const double speed = 1.0 + rng.uniform();
  switch (rng.uniform_int(4)) {
    case 0: s.vx = -speed; break;
    case 1: s.vx = speed; break;
    case 2: s.vy = -speed; break;
    default: s.vy = speed; break;
  }
  // Keep the centre inside the frame for the whole clip.
  const double travel = speed * static_cast<double>(dims.frames - 1);
  const double margin = 4.0;
  auto start = [&](double v, double extent) {
    double lo = margin, hi = extent - margin;
    if (v > 0) hi -= travel;
    if (v < 0) lo += travel;
    return lo + rng.uniform() * std::max(0.0, hi - lo);
  };
  s.x0 = start(s.vx, static_cast<double>(dims.width));
  s.y0 = start(s.vy, static_cast<double>(dims.height));
  return s;
}

PixelVideo render(const ClipSpec& s, const VideoDims& dims) {
  const Rgb& fg = color_values().at(s.color);
  const Rgb& bg = background_values().at(s.background);
  const double r = s.large ? 10.0 : 6.0;
  const std::size_t F = dims.frames, H = dims.height, W = dims.width;
  Tensor t({3, F, H, W});
  for (std::size_t f = 0; f < F; ++f) {
    const double cx = s.x0 + s.vx * static_cast<double>(f);
    const double cy = s.y0 + s.vy * static_cast<double>(f);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const bool in = inside(s.shape, static_cast<double>(x) + 0.5 - cx,
                               static_cast<double>(y) + 0.5 - cy, r);
        for (std::size_t c = 0; c < 3; ++c) t[((c * F + f) * H + y) * W + x] = in ? fg[c] : bg[c];
      }
  }
  return {std::move(t), 8.0};
}

std::string direction_word(const ClipSpec& s) {
  if (s.vx < 0) return "left";
  if (s.vx > 0) return "right";
  if (s.vy < 0) return "up";
  return "down";
}

std::string full_caption(const ClipSpec& s) {
  return std::string("a ") + (s.large ? "large " : "small ") + color_names()[s.color] + " " +
         shape_names()[s.shape] + " moves " + direction_word(s) + " on a " +
         background_names()[s.background] + " background";
}

std::vector<Clip> make_clips(std::size_t n, std::uint64_t seed, const std::string& prefix,
                             const VideoDims& dims) {
  std::vector<Clip> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng(seed).split("clip", i);
    Clip c;
    c.id = prefix + pad5(i);
    c.spec = random_spec(rng, dims);
    c.caption = full_caption(c.spec);
    c.video = render(c.spec, dims);
    out.push_back(std::move(c));
  }
  return out;
}

PixelVideo mirror_horizontal(const PixelVideo& v) {
  const std::size_t C = v.data.dim(0), F = v.data.dim(1), H = v.data.dim(2), W = v.data.dim(3);
  Tensor t(v.data.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          t[((c * F + f) * H + y) * W + x] = v.data[((c * F + f) * H + y) * W + (W - 1 - x)];
        }
  return {std::move(t), v.frame_rate};
}

PairedTask make_paired_task(std::size_t n, std::uint64_t seed, const VideoDims& dims) {
  PairedTask task;
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng(seed).split("paired", i);
    Clip ref;
    ref.id = "ref" + pad5(i);
    ref.spec = random_spec(rng, dims);
    ref.video = render(ref.spec, dims);
    // Redraw the tag until the caption embedding is unique in the task.
    for (;;) {
      std::string tag;
      for (int k = 0; k < 5; ++k) tag.push_back(static_cast<char>('a' + rng.uniform_int(26)));
      ref.caption = "a " + shape_names()[ref.spec.shape] + " moves " + direction_word(ref.spec) +
                    " clip " + tag;
      if (seen.insert(embed_caption(ref.caption)).second) break;
    }
    Clip target;
    target.id = "tgt" + pad5(i);
    target.spec = ref.spec;
    target.spec.x0 = static_cast<double>(dims.width) - ref.spec.x0;
    target.spec.vx = -ref.spec.vx;
    target.caption = ref.caption;
    target.video = mirror_horizontal(ref.video);
    task.references.push_back(std::move(ref));
    task.targets.push_back(std::move(target));
  }
  return task;
}

}  // namespace ditmem::synth
