#pragma once

// Quarter-resolution matching and context encoders.
//
// Each trunk is conv(stride 2) -> relu -> conv(stride 2) -> relu -> conv(stride 1),
// all 3x3 with padding 1. An optional auxiliary trunk stands in for the
// foundation-model feature path; its output is brought to the base channel
// count by a 1x1 "align" conv and added to the matching features and to the
// 1/4 context trunk. The context branch then downsamples twice to 1/8 and 1/16
// and produces the three gate-bias maps (c_z, c_r, c_h) for every level.
//
// Weight names:
//   fnet.conv{1,2,3}.{kernel,bias}        matching trunk
//   cnet.conv{1,2,3}.{kernel,bias}        context trunk
//   cnet.down{8,16}.{kernel,bias}         context downsampling
//   cnet.l{4,8,16}.gates.{kernel,bias}    3*hidden gate-bias head
//   cnet.l{4,8,16}.init.{kernel,bias}     optional hidden-state init head
//   aux.conv{1,2,3}.{kernel,bias}         auxiliary trunk (optional)
//   fuse.{match,context}.align.{kernel,bias}  1x1 channel-align convs

#include <array>
#include <cmath>
#include <string>

#include "defom/dataio.hpp"
#include "defom/random.hpp"
#include "defom/tensor.hpp"

namespace defom {

struct EncoderConfig {
  std::size_t stem1_channels = 32;
  std::size_t stem2_channels = 48;
  std::size_t feature_channels = 64;
  std::size_t hidden_channels = 64;
  bool use_aux = true;
  std::size_t aux_channels = 32;
};

struct FeaturePair {
  Tensor left;   // c x h x w
  Tensor right;  // c x h x w
};

// Per-level context added inside the GRU's update, reset and candidate convs.
struct GateBias {
  Tensor z;
  Tensor r;
  Tensor h;
};

struct ContextLevel {
  Tensor context;  // hidden x h x w
  GateBias gates;
  Tensor hidden;  // initial hidden state
};

// Levels at 1/4, 1/8 and 1/16 resolution, finest first.
struct ContextSet {
  std::array<ContextLevel, 3> levels;
};

inline constexpr std::array<int, 3> kContextStrides = {4, 8, 16};

// Conv layer bound to a bundle by name prefix.
struct ConvLayer {
  const Tensor* kernel;
  const Tensor* bias;
  Conv2dParams params;

  static ConvLayer bind(const WeightBundle& weights, const std::string& prefix, std::size_t stride = 1) {
    const Tensor& k = weights.at(prefix + ".kernel");
    require_rank(k, 4, (prefix + ".kernel").c_str());
    return {&k, &weights.at(prefix + ".bias"), {stride, k.dim(2) / 2}};
  }

  [[nodiscard]] Tensor operator()(const Tensor& input) const { return conv2d_forward(input, *kernel, *bias, params); }
};

// ---------------------------------------------------------------------------
// Deterministic initialisation: uniform(-k, k) with k = 1/sqrt(fan_in). Each
// tensor draws from its own stream keyed by (seed, name).

inline Tensor uniform_tensor(Shape shape, double bound, std::uint64_t stream) {
  Rng rng(stream);
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

inline void add_conv_weights(WeightBundle& bundle, const std::string& prefix, std::size_t out_channels,
                             std::size_t in_channels, std::size_t extent, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * extent * extent));
  bundle.tensors[prefix + ".kernel"] = uniform_tensor({out_channels, in_channels, extent, extent}, bound,
                                                      hash_string(seed, prefix + ".kernel"));
  bundle.tensors[prefix + ".bias"] = uniform_tensor({out_channels}, bound, hash_string(seed, prefix + ".bias"));
}

inline void add_encoder_weights(WeightBundle& bundle, const EncoderConfig& cfg, std::uint64_t seed) {
  auto trunk = [&](const std::string& name, std::size_t out_channels) {
    add_conv_weights(bundle, name + ".conv1", cfg.stem1_channels, 3, 3, seed);
    add_conv_weights(bundle, name + ".conv2", cfg.stem2_channels, cfg.stem1_channels, 3, seed);
    add_conv_weights(bundle, name + ".conv3", out_channels, cfg.stem2_channels, 3, seed);
  };
  const std::size_t hc = cfg.hidden_channels;
  trunk("fnet", cfg.feature_channels);
  trunk("cnet", hc);
  add_conv_weights(bundle, "cnet.down8", hc, hc, 3, seed);
  add_conv_weights(bundle, "cnet.down16", hc, hc, 3, seed);
  for (int stride : kContextStrides) {
    add_conv_weights(bundle, "cnet.l" + std::to_string(stride) + ".gates", 3 * hc, hc, 3, seed);
  }
  if (cfg.use_aux) {
    trunk("aux", cfg.aux_channels);
    add_conv_weights(bundle, "fuse.match.align", cfg.feature_channels, cfg.aux_channels, 1, seed);
    add_conv_weights(bundle, "fuse.context.align", hc, cfg.aux_channels, 1, seed);
  }
}

// ---------------------------------------------------------------------------

inline void check_image(const Tensor& image, const char* what) {
  require_rank(image, 3, what);
  if (image.dim(0) != 3) throw ShapeError(std::string(what) + ": expected 3 channels, got " + to_string(image.shape()));
  if (image.dim(1) % 16 || image.dim(2) % 16 || image.dim(1) == 0 || image.dim(2) == 0) {
    throw ShapeError(std::string(what) + ": height and width must be positive multiples of 16, got " +
                     to_string(image.shape()));
  }
}

// Runs a three-conv stride-(2,2,1) trunk; the output is at 1/4 resolution.
inline Tensor run_trunk(const Tensor& image, const WeightBundle& weights, const std::string& prefix) {
  const Tensor normalized = map(image, [](float v) { return 2.0f * v - 1.0f; });
  Tensor x = relu(ConvLayer::bind(weights, prefix + ".conv1", 2)(normalized));
  x = relu(ConvLayer::bind(weights, prefix + ".conv2", 2)(x));
  return ConvLayer::bind(weights, prefix + ".conv3", 1)(x);
}

// base + conv_align(aux). The align conv maps aux channels onto base channels.
inline Tensor fuse_features(const Tensor& base, const Tensor& aux, const Tensor& align_kernel,
                            const Tensor& align_bias) {
  require_rank(base, 3, "fuse_features base");
  require_rank(aux, 3, "fuse_features aux");
  if (base.dim(1) != aux.dim(1) || base.dim(2) != aux.dim(2)) {
    throw ShapeError("fuse_features: spatial mismatch " + to_string(base.shape()) + " vs " + to_string(aux.shape()));
  }
  const Conv2dParams params{1, align_kernel.dim(2) / 2};
  Tensor out = conv2d_forward(aux, align_kernel, align_bias, params);
  if (out.shape() != base.shape()) {
    throw ShapeError("fuse_features: aligned aux " + to_string(out.shape()) + " does not match base " +
                     to_string(base.shape()));
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += base[i];
  return out;
}

inline Tensor fuse_features(const Tensor& base, const Tensor& aux, const WeightBundle& weights,
                            const std::string& prefix) {
  return fuse_features(base, aux, weights.at(prefix + ".kernel"), weights.at(prefix + ".bias"));
}

inline Tensor encode_single(const Tensor& image, const WeightBundle& weights) {
  Tensor features = run_trunk(image, weights, "fnet");
  if (weights.contains("aux.conv1.kernel")) {
    features = fuse_features(features, run_trunk(image, weights, "aux"), weights, "fuse.match.align");
  }
  return features;
}

inline FeaturePair encode_matching(const Tensor& left, const Tensor& right, const WeightBundle& weights) {
  check_image(left, "encode_matching left");
  check_image(right, "encode_matching right");
  if (left.shape() != right.shape()) throw ShapeError("encode_matching: left/right shapes differ");
  return {encode_single(left, weights), encode_single(right, weights)};
}

inline ContextSet encode_context(const Tensor& left, const WeightBundle& weights) {
  check_image(left, "encode_context");
  Tensor trunk = relu(run_trunk(left, weights, "cnet"));
  if (weights.contains("aux.conv1.kernel")) {
    trunk = fuse_features(trunk, run_trunk(left, weights, "aux"), weights, "fuse.context.align");
  }
  ContextSet out;
  Tensor level_input = std::move(trunk);
  for (std::size_t l = 0; l < kContextStrides.size(); ++l) {
    const std::string name = "cnet.l" + std::to_string(kContextStrides[l]);
    if (l > 0) {
      level_input = relu(ConvLayer::bind(weights, "cnet.down" + std::to_string(kContextStrides[l]), 2)(level_input));
    }
    ContextLevel& level = out.levels[l];
    const Tensor gates = ConvLayer::bind(weights, name + ".gates")(level_input);
    const std::size_t hc = gates.dim(0) / 3;
    level.gates = {slice_channels(gates, 0, hc), slice_channels(gates, hc, hc), slice_channels(gates, 2 * hc, hc)};
    if (weights.contains(name + ".init.kernel")) {
      level.hidden = map(ConvLayer::bind(weights, name + ".init")(level_input), [](float v) { return std::tanh(v); });
    } else {
      level.hidden = Tensor({hc, level_input.dim(1), level_input.dim(2)}, 0.0f);
    }
    level.context = level_input;
  }
  return out;
}

// Non-learned descriptor: each quarter-res pixel gets its 4x4x3 input patch,
// made zero-mean and unit-norm. Distinct random textures give nearly
// orthonormal descriptors, so correlation peaks at true matches.
inline Tensor patch_descriptor(const Tensor& image) {
  check_image(image, "patch_descriptor");
  const std::size_t h = image.dim(1) / 4, w = image.dim(2) / 4;
  constexpr std::size_t kChannels = 3 * 16;
  Tensor out({kChannels, h, w});
  std::array<float, kChannels> patch{};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t k = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < 4; ++dy)
          for (std::size_t dx = 0; dx < 4; ++dx) patch[k++] = image(c, 4 * y + dy, 4 * x + dx);
      double mean = 0.0;
      for (float v : patch) mean += v;
      mean /= kChannels;
      double norm = 0.0;
      for (float v : patch) norm += (v - mean) * (v - mean);
      norm = std::sqrt(norm);
      for (std::size_t c = 0; c < kChannels; ++c) {
        out(c, y, x) = norm > 1e-9 ? static_cast<float>((patch[c] - mean) / norm) : 0.0f;
      }
    }
  return out;
}

inline FeaturePair encode_patches(const Tensor& left, const Tensor& right) {
  if (left.shape() != right.shape()) throw ShapeError("encode_patches: left/right shapes differ");
  return {patch_descriptor(left), patch_descriptor(right)};
}

}  // namespace defom
