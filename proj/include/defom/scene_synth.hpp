#pragma once

// Rectified stereo pairs of fronto-parallel textured layers with exact
// integer ground-truth disparity.

#include <cstdint>
#include <string>
#include <vector>

#include "defom/random.hpp"
#include "defom/tensor.hpp"

namespace defom {

struct SceneSpec {
  struct Layer {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open, left-image coordinates
    int disparity = 0;
    std::uint64_t seed = 0;
  };

  std::size_t height = 64;
  std::size_t width = 128;
  int background_disparity = 0;
  std::uint64_t background_seed = 0;
  std::vector<Layer> layers;

  void validate() const {
    if (height == 0 || width == 0) throw std::invalid_argument("scene size must be positive");
    const auto cap = static_cast<int>(width / 4);
    auto check_disparity = [&](int d, const std::string& what) {
      if (d < 0 || d > cap) {
        throw std::invalid_argument(what + " disparity " + std::to_string(d) + " outside [0, " + std::to_string(cap) +
                                    "]");
      }
    };
    check_disparity(background_disparity, "background");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      const std::string name = "layer " + std::to_string(i);
      if (l.x0 >= l.x1 || l.y0 >= l.y1 || l.x1 > width || l.y1 > height) {
        throw std::invalid_argument(name + " is empty or outside the image");
      }
      check_disparity(l.disparity, name);
      if (l.disparity < background_disparity) {
        throw std::invalid_argument(name + " lies behind the background");
      }
    }
  }
};

struct StereoSample {
  Tensor left;       // 3 x H x W in [0, 1]
  Tensor right;      // 3 x H x W
  Tensor disparity;  // H x W, left view
  Mask valid;        // H x W; 0 where the match is occluded or leaves the image
};

namespace detail {

// Per-pixel uniform colour, quantised to 8 bits so PNG round trips are exact.
inline float texel(std::uint64_t seed, std::size_t channel, std::size_t y, long long x) {
  std::uint64_t h = hash_combine(seed, static_cast<std::uint64_t>(channel));
  h = hash_combine(h, static_cast<std::uint64_t>(y));
  h = hash_combine(h, static_cast<std::uint64_t>(x));
  return static_cast<float>(h % 256) / 255.0f;
}

}  // namespace detail

inline StereoSample synth_scene(const SceneSpec& spec) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width;
  constexpr int kBackground = -1;

  // Frontmost layer: largest disparity, later layers win ties.
  auto front_left = [&](std::size_t y, long long x) {
    int best = kBackground;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& l = spec.layers[i];
      if (y < l.y0 || y >= l.y1 || x < static_cast<long long>(l.x0) || x >= static_cast<long long>(l.x1)) continue;
      if (best == kBackground || l.disparity >= spec.layers[static_cast<std::size_t>(best)].disparity) {
        best = static_cast<int>(i);
      }
    }
    return best;
  };
  auto disparity_of = [&](int layer) {
    return layer == kBackground ? spec.background_disparity : spec.layers[static_cast<std::size_t>(layer)].disparity;
  };
  auto seed_of = [&](int layer) {
    return layer == kBackground ? spec.background_seed : spec.layers[static_cast<std::size_t>(layer)].seed;
  };
  // A right-image column x shows layer L iff x + d_L falls inside L's left footprint.
  auto front_right = [&](std::size_t y, long long x) {
    int best = kBackground;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& l = spec.layers[i];
      const long long xl = x + l.disparity;
      if (y < l.y0 || y >= l.y1 || xl < static_cast<long long>(l.x0) || xl >= static_cast<long long>(l.x1)) continue;
      if (best == kBackground || l.disparity >= spec.layers[static_cast<std::size_t>(best)].disparity) {
        best = static_cast<int>(i);
      }
    }
    return best;
  };

  StereoSample out{Tensor({3, H, W}), Tensor({3, H, W}), Tensor({H, W}), Mask({H, W}, 0)};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto xl = static_cast<long long>(x);
      const int layer = front_left(y, xl);
      const int d = disparity_of(layer);
      for (std::size_t c = 0; c < 3; ++c) out.left(c, y, x) = detail::texel(seed_of(layer), c, y, xl);
      out.disparity(y, x) = static_cast<float>(d);
      const long long match = xl - d;
      out.valid(y, x) = match >= 0 && front_right(y, match) == layer;

      const int seen = front_right(y, xl);
      const long long source = xl + disparity_of(seen);
      for (std::size_t c = 0; c < 3; ++c) out.right(c, y, x) = detail::texel(seed_of(seen), c, y, source);
    }
  return out;
}

// Quarter-resolution ground truth in quarter-res pixel units. A coarse pixel
// is valid only if its whole 4x4 block is valid and shares one disparity.
inline std::pair<Tensor, Mask> quarter_ground_truth(const Tensor& disparity, const Mask& valid) {
  require_rank(disparity, 2, "quarter_ground_truth");
  if (disparity.dim(0) % 4 || disparity.dim(1) % 4) throw ShapeError("quarter_ground_truth: size not divisible by 4");
  const std::size_t h = disparity.dim(0) / 4, w = disparity.dim(1) / 4;
  Tensor d({h, w});
  Mask m({h, w}, 0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const float first = disparity(4 * i, 4 * j);
      bool ok = true;
      double sum = 0.0;
      for (std::size_t dy = 0; dy < 4; ++dy)
        for (std::size_t dx = 0; dx < 4; ++dx) {
          const float v = disparity(4 * i + dy, 4 * j + dx);
          sum += v;
          ok = ok && valid(4 * i + dy, 4 * j + dx) && v == first;
        }
      d(i, j) = static_cast<float>(sum / 16.0 / 4.0);
      m(i, j) = ok;
    }
  return {std::move(d), std::move(m)};
}

}  // namespace defom
