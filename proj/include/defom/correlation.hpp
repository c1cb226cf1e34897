#pragma once

// All-pairs correlation along rectified scanlines, its pooled pyramid, and the
// two retrieval schemes: pyramid lookup (current disparity +- radius on every
// level) and scale lookup (current disparity times a grid of factors, +-1, on
// the finest level only).
//
// Sign convention: the left pixel at column j matches right column j - d, so a
// candidate displacement D is read from the volume's last axis at j - D.

#include <cmath>
#include <string>
#include <vector>

#include "defom/encoders.hpp"
#include "defom/tensor.hpp"

namespace defom {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct LookupConfig {
  int radius = 4;
  int num_levels = 2;
  std::vector<float> scale_factors = {1.0f / 8, 2.0f / 8, 4.0f / 8, 6.0f / 8,
                                      8.0f / 8, 10.0f / 8, 12.0f / 8, 16.0f / 8};

  void validate() const {
    if (radius < 1) throw ConfigError("lookup radius must be >= 1");
    if (num_levels < 1) throw ConfigError("pyramid must have at least one level");
    if (scale_factors.empty()) throw ConfigError("scale factor list is empty");
    for (std::size_t m = 0; m < scale_factors.size(); ++m) {
      if (!(scale_factors[m] > 0.0f) || !std::isfinite(scale_factors[m])) {
        throw ConfigError("scale factors must be finite and strictly positive");
      }
      if (m > 0 && !(scale_factors[m] > scale_factors[m - 1])) {
        throw ConfigError("scale factors must be sorted strictly ascending");
      }
    }
  }

  [[nodiscard]] std::size_t pyramid_channels() const {
    return static_cast<std::size_t>(num_levels) * static_cast<std::size_t>(2 * radius + 1);
  }
  [[nodiscard]] std::size_t scale_channels() const { return 3 * scale_factors.size(); }
};

// Largest displacement, in input-image pixels, a pyramid lookup can probe from
// a zero disparity: feature stride * coarsest level scale * radius.
[[nodiscard]] inline long long pyramid_search_range(const LookupConfig& cfg, int feature_stride = 4) {
  return static_cast<long long>(feature_stride) * (1LL << (cfg.num_levels - 1)) * cfg.radius;
}

struct CorrelationPyramid {
  std::vector<Tensor> levels;  // levels[0] is h x w x w, each next level halves the last axis

  [[nodiscard]] std::size_t num_levels() const noexcept { return levels.size(); }
  [[nodiscard]] const Tensor& finest() const { return levels.at(0); }
};

// C[i, j, k] = sum_c left[c, i, j] * right[c, i, k], unnormalised.
inline Tensor build_correlation(const Tensor& left, const Tensor& right) {
  require_rank(left, 3, "build_correlation left");
  require_rank(right, 3, "build_correlation right");
  if (left.shape() != right.shape()) {
    throw ShapeError("build_correlation: feature shapes differ " + to_string(left.shape()) + " vs " +
                     to_string(right.shape()));
  }
  const std::size_t c = left.dim(0), h = left.dim(1), w = left.dim(2);
  Tensor volume({h, w, w}, 0.0f);
  for (std::size_t i = 0; i < h; ++i) {
    float* rows = volume.data() + i * w * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* fl = left.data() + (ch * h + i) * w;
      const float* fr = right.data() + (ch * h + i) * w;
      for (std::size_t j = 0; j < w; ++j) {
        const float a = fl[j];
        float* dst = rows + j * w;
        for (std::size_t k = 0; k < w; ++k) dst[k] += a * fr[k];
      }
    }
  }
  return volume;
}

inline Tensor build_correlation(const FeaturePair& pair) { return build_correlation(pair.left, pair.right); }

inline CorrelationPyramid build_pyramid(Tensor first_level, int num_levels) {
  require_rank(first_level, 3, "build_pyramid");
  if (num_levels < 1) throw ConfigError("build_pyramid: num_levels must be >= 1");
  if ((first_level.dim(2) >> (num_levels - 1)) < 1) {
    throw ShapeError("build_pyramid: " + std::to_string(num_levels) + " levels reduce last dim " +
                     std::to_string(first_level.dim(2)) + " below 1");
  }
  CorrelationPyramid pyr;
  pyr.levels.reserve(static_cast<std::size_t>(num_levels));
  pyr.levels.push_back(std::move(first_level));
  for (int l = 1; l < num_levels; ++l) pyr.levels.push_back(avg_pool_last(pyr.levels.back()));
  return pyr;
}

// Sampling positions on the volume's last axis. Both the direct and the
// planned lookup paths go through these so they agree bit for bit.
[[nodiscard]] inline float pyramid_position(std::size_t column, float disparity, float level_scale,
                                            float offset) noexcept {
  return (static_cast<float>(column) - disparity) * level_scale + offset;
}

[[nodiscard]] inline float scale_position(std::size_t column, float disparity, float factor, float delta) noexcept {
  return static_cast<float>(column) - (factor * disparity + delta);
}

inline void check_lookup_inputs(const Tensor& volume, const Tensor& disparity, const char* what) {
  require_rank(volume, 3, what);
  require_rank(disparity, 2, what);
  if (volume.dim(0) != disparity.dim(0) || volume.dim(1) != disparity.dim(1)) {
    throw ShapeError(std::string(what) + ": disparity " + to_string(disparity.shape()) + " does not match volume " +
                     to_string(volume.shape()));
  }
}

// Direct pyramid lookup: builds the index tensor for every level, samples it,
// and concatenates level-major with offsets ascending.
inline Tensor pyramid_lookup(const CorrelationPyramid& pyr, const Tensor& disparity, const LookupConfig& cfg) {
  if (pyr.num_levels() < static_cast<std::size_t>(cfg.num_levels)) {
    throw ConfigError("pyramid_lookup: pyramid has fewer levels than configured");
  }
  check_lookup_inputs(pyr.finest(), disparity, "pyramid_lookup");
  const std::size_t h = disparity.dim(0), w = disparity.dim(1);
  const auto taps = static_cast<std::size_t>(2 * cfg.radius + 1);
  Tensor out({h, w, cfg.pyramid_channels()});
  for (int l = 0; l < cfg.num_levels; ++l) {
    const float level_scale = 1.0f / static_cast<float>(1 << l);
    Tensor indexes({h, w, taps});
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t t = 0; t < taps; ++t) {
          const float offset = static_cast<float>(static_cast<int>(t) - cfg.radius);
          indexes(i, j, t) = pyramid_position(j, disparity(i, j), level_scale, offset);
        }
    const Tensor sampled = bilinear_sample_last(pyr.levels[static_cast<std::size_t>(l)], indexes);
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t t = 0; t < taps; ++t) {
        out[p * out.dim(2) + static_cast<std::size_t>(l) * taps + t] = sampled[p * taps + t];
      }
  }
  return out;
}

// Direct scale lookup on the finest level: for every factor s, samples at
// s*d - 1, s*d, s*d + 1, factor-major.
inline Tensor scale_lookup(const Tensor& first_level, const Tensor& disparity, const LookupConfig& cfg) {
  check_lookup_inputs(first_level, disparity, "scale_lookup");
  const std::size_t h = disparity.dim(0), w = disparity.dim(1);
  const std::size_t k = cfg.scale_channels();
  Tensor indexes({h, w, k});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t m = 0; m < cfg.scale_factors.size(); ++m)
        for (int delta = -1; delta <= 1; ++delta) {
          indexes(i, j, 3 * m + static_cast<std::size_t>(delta + 1)) =
              scale_position(j, disparity(i, j), cfg.scale_factors[m], static_cast<float>(delta));
        }
  return bilinear_sample_last(first_level, indexes);
}

// Neighbour offsets and level scales defined once for a fixed configuration
// and map shape, then reused by every iteration. Lookups write into
// caller-provided buffers and never allocate.
class LookupPlan {
 public:
  LookupPlan(LookupConfig cfg, std::size_t height, std::size_t width)
      : cfg_(std::move(cfg)), height_(height), width_(width) {
    cfg_.validate();
    for (int l = 0; l < cfg_.num_levels; ++l) level_scales_.push_back(1.0f / static_cast<float>(1 << l));
    for (int o = -cfg_.radius; o <= cfg_.radius; ++o) offsets_.push_back(static_cast<float>(o));
    for (float s : cfg_.scale_factors) {
      for (int delta = -1; delta <= 1; ++delta) {
        scale_taps_.push_back({s, static_cast<float>(delta)});
      }
    }
  }

  [[nodiscard]] const LookupConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] Shape pyramid_shape() const { return {height_, width_, cfg_.pyramid_channels()}; }
  [[nodiscard]] Shape scale_shape() const { return {height_, width_, cfg_.scale_channels()}; }

  void pyramid_lookup_into(const CorrelationPyramid& pyr, const Tensor& disparity, Tensor& out) const {
    check(disparity, out, pyramid_shape());
    if (pyr.num_levels() < level_scales_.size()) {
      throw ConfigError("LookupPlan: pyramid has fewer levels than configured");
    }
    check_lookup_inputs(pyr.finest(), disparity, "LookupPlan");
    const std::size_t channels = out.dim(2);
    const std::size_t taps = offsets_.size();
    for (std::size_t l = 0; l < level_scales_.size(); ++l) {
      const Tensor& level = pyr.levels[l];
      const std::size_t n = level.dim(2);
      const float level_scale = level_scales_[l];
      for (std::size_t i = 0; i < height_; ++i)
        for (std::size_t j = 0; j < width_; ++j) {
          const std::size_t p = i * width_ + j;
          const float* row = level.data() + p * n;
          float* dst = out.data() + p * channels + l * taps;
          const float d = disparity[p];
          for (std::size_t t = 0; t < taps; ++t) {
            dst[t] = sample_linear(row, n, pyramid_position(j, d, level_scale, offsets_[t]));
          }
        }
    }
  }

  void scale_lookup_into(const Tensor& first_level, const Tensor& disparity, Tensor& out) const {
    check(disparity, out, scale_shape());
    const std::size_t n = first_level.dim(2);
    const std::size_t k = scale_taps_.size();
    for (std::size_t i = 0; i < height_; ++i)
      for (std::size_t j = 0; j < width_; ++j) {
        const std::size_t p = i * width_ + j;
        const float* row = first_level.data() + p * n;
        float* dst = out.data() + p * k;
        const float d = disparity[p];
        for (std::size_t t = 0; t < k; ++t) {
          dst[t] = sample_linear(row, n, scale_position(j, d, scale_taps_[t].factor, scale_taps_[t].delta));
        }
      }
  }

 private:
  struct ScaleTap {
    float factor;
    float delta;
  };

  void check(const Tensor& disparity, const Tensor& out, const Shape& expected) const {
    if (disparity.shape() != Shape{height_, width_}) {
      throw ShapeError("LookupPlan: disparity shape " + to_string(disparity.shape()) + " does not match plan");
    }
    if (out.shape() != expected) {
      throw ShapeError("LookupPlan: output buffer " + to_string(out.shape()) + ", expected " + to_string(expected));
    }
  }

  LookupConfig cfg_;
  std::size_t height_;
  std::size_t width_;
  std::vector<float> level_scales_;
  std::vector<float> offsets_;
  std::vector<ScaleTap> scale_taps_;
};

}  // namespace defom
