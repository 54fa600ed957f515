#include "ditmem/latent_codec.hpp"

#include <Eigen/Dense>

#include <algorithm>

#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"

namespace ditmem {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}

CodecMode parse_codec_mode(const std::string& s) {
  if (s == "conv") return CodecMode::kConv;
  if (s == "identity") return CodecMode::kIdentity;
  throw std::invalid_argument("unknown codec mode '" + s + "' (expected conv|identity)");
}

LatentCodec::LatentCodec(CodecConfig cfg) : cfg_(cfg) {
  if (cfg_.temporal_factor == 0 || cfg_.spatial_factor == 0) {
    throw std::invalid_argument("codec downsampling factors must be positive");
  }
  if (cfg_.mode == CodecMode::kConv) {
    if (cfg_.channels == 0) throw std::invalid_argument("codec channels must be positive");
    Rng rng(cfg_.seed);
    params_.add("weight", DenseInit::weight(patch_size(), cfg_.channels, rng));
    params_.add("bias", normal_init({cfg_.channels}, 0.05, rng));
  }
  refresh();
}

std::size_t LatentCodec::patch_size() const {
  return 3 * cfg_.temporal_factor * cfg_.spatial_factor * cfg_.spatial_factor;
}

std::size_t LatentCodec::latent_channels() const {
  return cfg_.mode == CodecMode::kIdentity ? patch_size() : cfg_.channels;
}

Shape LatentCodec::latent_shape(const Shape& px) const {
  if (px.size() != 4 || px[0] != 3) {
    throw DataError("pixel video must be [3, F, H, W], got " + shape_to_string(px));
  }
  if (px[1] % cfg_.temporal_factor || px[2] % cfg_.spatial_factor || px[3] % cfg_.spatial_factor ||
      px[1] == 0 || px[2] == 0 || px[3] == 0) {
    throw DataError("pixel video " + shape_to_string(px) + " not divisible by codec factors (" +
                    std::to_string(cfg_.temporal_factor) + ", " +
                    std::to_string(cfg_.spatial_factor) + ")");
  }
  return {latent_channels(), px[1] / cfg_.temporal_factor, px[2] / cfg_.spatial_factor,
          px[3] / cfg_.spatial_factor};
}

Shape LatentCodec::pixel_shape(const Shape& lat) const {
  if (lat.size() != 4 || lat[0] != latent_channels()) {
    throw DataError("latent must be [" + std::to_string(latent_channels()) + ", D, H, W], got " +
                    shape_to_string(lat));
  }
  return {3, lat[1] * cfg_.temporal_factor, lat[2] * cfg_.spatial_factor,
          lat[3] * cfg_.spatial_factor};
}

void LatentCodec::refresh() {
  Fnv64 h;
  h.update("ditmem-codec-v1");
  h.update_u64(static_cast<std::uint64_t>(cfg_.mode));
  h.update_u64(cfg_.channels);
  h.update_u64(cfg_.temporal_factor);
  h.update_u64(cfg_.spatial_factor);
  h.update_f64(cfg_.latent_scale);
  params_.hash_into(h);
  fingerprint_ = hex64(h.digest());

  if (cfg_.mode == CodecMode::kConv) {
    const auto& w = params_.get("weight").value();  // [P, C]
    const auto P = static_cast<Eigen::Index>(w.dim(0)), C = static_cast<Eigen::Index>(w.dim(1));
    Eigen::Map<const RowMat> wm(w.ptr(), P, C);
    RowMat gram = wm.transpose() * wm;  // [C, C]
    RowMat pinv = wm * gram.inverse();  // [P, C]
    decoder_ = Tensor({w.dim(0), w.dim(1)});
    Eigen::Map<RowMat>(decoder_.ptr(), P, C) = pinv;
  }
}

LatentVideo LatentCodec::encode(const PixelVideo& v) const {
  const Shape lat = latent_shape(v.data.shape());
  for (double x : v.data.data()) {
    if (!(x >= 0.0 && x <= 1.0)) throw DataError("pixel values must lie in [0,1]");
  }
  const std::size_t F = v.data.dim(1), H = v.data.dim(2), W = v.data.dim(3);
  const std::size_t tf = cfg_.temporal_factor, sf = cfg_.spatial_factor;
  const std::size_t D = lat[1], h = lat[2], w = lat[3];
  const std::size_t P = patch_size();
  (void)F;

  Tensor out(lat);
  std::vector<double> patch(P);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t k = 0;
        for (std::size_t ch = 0; ch < 3; ++ch)
          for (std::size_t dt = 0; dt < tf; ++dt)
            for (std::size_t dy = 0; dy < sf; ++dy)
              for (std::size_t dx = 0; dx < sf; ++dx, ++k) {
                patch[k] = v.data[((ch * v.data.dim(1) + d * tf + dt) * H + y * sf + dy) * W + x * sf + dx];
              }
        const std::size_t pos = (d * h + y) * w + x;
        const std::size_t S = D * h * w;
        if (cfg_.mode == CodecMode::kIdentity) {
          for (std::size_t c = 0; c < P; ++c) out[c * S + pos] = patch[c];
        } else {
          const auto& wt = params_.get("weight").value();
          const auto& b = params_.get("bias").value();
          for (std::size_t c = 0; c < cfg_.channels; ++c) {
            double acc = b[c];
            for (std::size_t j = 0; j < P; ++j) acc += wt[j * cfg_.channels + c] * (patch[j] - 0.5);
            out[c * S + pos] = cfg_.latent_scale * acc;
          }
        }
      }
  return {std::move(out), fingerprint_};
}

PixelVideo LatentCodec::decode(const LatentVideo& z) const {
  if (z.codec_fingerprint != fingerprint_) {
    throw DataError("latent fingerprint " + z.codec_fingerprint +
                    " does not match active codec " + fingerprint_);
  }
  const Shape px = pixel_shape(z.data.shape());
  if (!z.data.all_finite()) throw NumericError("latent contains non-finite values");
  const std::size_t D = z.data.dim(1), h = z.data.dim(2), w = z.data.dim(3);
  const std::size_t tf = cfg_.temporal_factor, sf = cfg_.spatial_factor;
  const std::size_t P = patch_size(), S = D * h * w;
  const std::size_t H = px[2], W = px[3];
  Tensor out(px);
  std::vector<double> patch(P);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t pos = (d * h + y) * w + x;
        if (cfg_.mode == CodecMode::kIdentity) {
          for (std::size_t c = 0; c < P; ++c) patch[c] = z.data[c * S + pos];
        } else {
          const auto& b = params_.get("bias").value();
          for (std::size_t j = 0; j < P; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cfg_.channels; ++c) {
              acc += decoder_[j * cfg_.channels + c] * (z.data[c * S + pos] / cfg_.latent_scale - b[c]);
            }
            patch[j] = acc + 0.5;
          }
        }
        std::size_t k = 0;
        for (std::size_t ch = 0; ch < 3; ++ch)
          for (std::size_t dt = 0; dt < tf; ++dt)
            for (std::size_t dy = 0; dy < sf; ++dy)
              for (std::size_t dx = 0; dx < sf; ++dx, ++k) {
                out[((ch * px[1] + d * tf + dt) * H + y * sf + dy) * W + x * sf + dx] =
                    std::clamp(patch[k], 0.0, 1.0);
              }
      }
  return {std::move(out), 8.0};
}

}  // namespace ditmem
