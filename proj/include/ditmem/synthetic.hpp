#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditmem/latent_codec.hpp"
#include "ditmem/rng.hpp"

namespace ditmem::synth {

// Moving-shape clips with paired captions.
struct ClipSpec {
  std::size_t shape = 0;       // index into shape_names()
  std::size_t color = 0;       // index into color_names()
  std::size_t background = 0;  // index into background_names()
  bool large = false;
  double x0 = 32, y0 = 32;     // centre at frame 0, pixels
  double vx = 0, vy = 0;       // pixels per frame
};

struct Clip {
  std::string id;
  std::string caption;
  ClipSpec spec;
  PixelVideo video;
};

struct VideoDims {
  std::size_t frames = 16, height = 64, width = 64;
};

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();
const std::vector<std::string>& background_names();

ClipSpec random_spec(Rng& rng, const VideoDims& dims = {});
PixelVideo render(const ClipSpec& spec, const VideoDims& dims = {});
std::string direction_word(const ClipSpec& spec);
std::string full_caption(const ClipSpec& spec);

// Clip ids are "<prefix><index>", zero padded to five digits.
std::vector<Clip> make_clips(std::size_t n, std::uint64_t seed, const std::string& prefix,
                             const VideoDims& dims = {});

PixelVideo mirror_horizontal(const PixelVideo& v);

// Reference/target pairs: every target is the horizontal mirror of its
// reference and carries the reference's caption. Captions name shape and
// motion plus a unique tag word, never colors, so that the reference is the
// only source of appearance.
struct PairedTask {
  std::vector<Clip> references;
  std::vector<Clip> targets;  // targets[i] pairs with references[i]
};
PairedTask make_paired_task(std::size_t n, std::uint64_t seed, const VideoDims& dims = {});

}  // namespace ditmem::synth
