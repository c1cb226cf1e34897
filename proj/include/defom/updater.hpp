#pragma once

// Recurrent disparity refinement.
//
// The quarter-resolution disparity is initialised from a relative depth map,
// refined multiplicatively by scale updates (driven by scale lookup), then
// additively by delta updates (driven by pyramid lookup). After every
// iteration the estimate is convex-upsampled to full resolution.
//
// Scale and delta updates each own an update block:
//   {su,du}.enc_corr          1x1 conv, lookup features -> corr_channels
//   {su,du}.enc_disp          3x3 conv, disparity -> disp_channels
//   {su,du}.gru{4,8,16}.{z,r,h}  ConvGRU convs per resolution
//   {su,du}.head.conv{1,2}    two-conv head producing one channel
//   {su,du}.mask              convex-upsampling logits, 9 * 16 channels
// Hidden states are shared between the two phases.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "defom/correlation.hpp"
#include "defom/depth_provider.hpp"
#include "defom/encoders.hpp"
#include "defom/tensor.hpp"

namespace defom {

struct PhaseError : std::logic_error {
  using std::logic_error::logic_error;
};

enum class Phase { ScaleUpdate, DeltaUpdate };
enum class Mode { Learned, Oracle };

inline const char* to_string(Phase phase) { return phase == Phase::ScaleUpdate ? "SU" : "DU"; }
inline const char* to_string(Mode mode) { return mode == Mode::Learned ? "learned" : "oracle"; }

inline constexpr std::size_t kUpsampleFactor = 4;
inline constexpr std::size_t kMaskChannels = 9 * kUpsampleFactor * kUpsampleFactor;

struct EngineConfig {
  float eta = 0.5f;
  float eps = 0.05f;
  int su_iters = 8;
  int total_iters = 32;
  LookupConfig lookup;
  EncoderConfig encoder;
  std::size_t corr_channels = 64;
  std::size_t disp_channels = 16;

  void validate() const {
    lookup.validate();
    if (!(eta > 0.0f)) throw ConfigError("eta must be positive");
    if (!(eps > 0.0f)) throw ConfigError("eps must be positive");
    if (su_iters < 0 || total_iters < su_iters) throw ConfigError("need 0 <= su_iters <= total_iters");
    if (encoder.hidden_channels == 0 || corr_channels == 0 || disp_channels == 0) {
      throw ConfigError("channel counts must be positive");
    }
  }
};

struct DisparityState {
  Tensor disparity;                 // h x w, >= eps
  std::array<Tensor, 3> hidden;     // 1/4, 1/8, 1/16
  int iteration = 0;
  Phase phase = Phase::ScaleUpdate;
};

// ---------------------------------------------------------------------------
// Initialisation from relative depth

// d0 = eta * w * z / max(z) + eps, or eps everywhere when max(z) <= 0.
template <typename T>
BasicTensor<T> init_disparity(const BasicTensor<T>& z, std::size_t width, T eta, T eps) {
  require_rank(z, 2, "init_disparity");
  T z_max = T(0);
  for (T v : z.values()) {
    if (v < T(0)) throw std::invalid_argument("init_disparity: depth must be nonnegative");
    z_max = std::max(z_max, v);
  }
  BasicTensor<T> d0(z.shape(), eps);
  if (!(z_max > T(0))) return d0;
  const double gain = static_cast<double>(eta) * static_cast<double>(width);
  for (std::size_t p = 0; p < z.size(); ++p) {
    d0[p] = static_cast<T>(gain * (static_cast<double>(z[p]) / static_cast<double>(z_max)) + static_cast<double>(eps));
  }
  return d0;
}

inline Tensor init_disparity(const DepthEstimate& depth, std::size_t width, float eta, float eps) {
  return init_disparity(depth.z, width, eta, eps);
}

// ---------------------------------------------------------------------------
// ConvGRU

// Logistic function saturating at +-16 so gates stay strictly inside (0, 1)
// in single precision.
[[nodiscard]] inline float gate_sigmoid(float v) noexcept { return sigmoid(std::clamp(v, -16.0f, 16.0f)); }

struct GruResult {
  Tensor hidden;
  Tensor update_gate;
  Tensor reset_gate;
};

// z = sig(Conv([h, x], Wz) + cz); r = sig(Conv([h, x], Wr) + cr)
// q = tanh(Conv([r * h, x], Wh) + ch); h' = (1 - z) * h + z * q
inline GruResult gru_step(const Tensor& hidden, const GateBias& gates, const Tensor& x, const WeightBundle& weights,
                          const std::string& prefix) {
  require_rank(hidden, 3, "gru_step hidden");
  for (const Tensor* g : {&gates.z, &gates.r, &gates.h}) {
    if (g->shape() != hidden.shape()) {
      throw ShapeError("gru_step " + prefix + ": gate bias " + to_string(g->shape()) + " does not match hidden " +
                       to_string(hidden.shape()));
    }
  }
  const Tensor hx = concat_channels({&hidden, &x});
  GruResult out;
  out.update_gate = ConvLayer::bind(weights, prefix + ".z")(hx);
  out.reset_gate = ConvLayer::bind(weights, prefix + ".r")(hx);
  if (out.update_gate.shape() != hidden.shape()) {
    throw ShapeError("gru_step " + prefix + ": conv output " + to_string(out.update_gate.shape()) +
                     " does not match hidden " + to_string(hidden.shape()));
  }
  Tensor reset_hidden(hidden.shape());
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    out.update_gate[i] = gate_sigmoid(out.update_gate[i] + gates.z[i]);
    out.reset_gate[i] = gate_sigmoid(out.reset_gate[i] + gates.r[i]);
    reset_hidden[i] = out.reset_gate[i] * hidden[i];
  }
  Tensor candidate = ConvLayer::bind(weights, prefix + ".h")(concat_channels({&reset_hidden, &x}));
  out.hidden = Tensor(hidden.shape());
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const float q = std::tanh(candidate[i] + gates.h[i]);
    const float z = out.update_gate[i];
    out.hidden[i] = (1.0f - z) * hidden[i] + z * q;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convex upsampling

// Each full-res pixel is 4x a softmax-weighted mix of its coarse 3x3
// neighbourhood (edge-replicated). Logit channel (ky*3 + kx)*16 + sy*4 + sx
// weights neighbour (ky, kx) for sub-pixel (sy, sx).
inline Tensor convex_upsample(const Tensor& disparity, const Tensor& mask_logits) {
  require_rank(disparity, 2, "convex_upsample disparity");
  require_rank(mask_logits, 3, "convex_upsample mask");
  const std::size_t h = disparity.dim(0), w = disparity.dim(1);
  if (mask_logits.dim(0) != kMaskChannels || mask_logits.dim(1) != h || mask_logits.dim(2) != w) {
    throw ShapeError("convex_upsample: mask " + to_string(mask_logits.shape()) + " does not match disparity " +
                     to_string(disparity.shape()));
  }
  constexpr std::size_t f = kUpsampleFactor;
  Tensor out({h * f, w * f});
  std::array<double, 9> weights{};
  std::array<double, 9> neighbours{};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t k = 0; k < 9; ++k) {
        const auto y = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(i + k / 3) - 1, 0,
                                                  static_cast<std::ptrdiff_t>(h) - 1);
        const auto x = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(j + k % 3) - 1, 0,
                                                  static_cast<std::ptrdiff_t>(w) - 1);
        neighbours[k] = disparity(y, x);
      }
      for (std::size_t sy = 0; sy < f; ++sy)
        for (std::size_t sx = 0; sx < f; ++sx) {
          double peak = -std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < 9; ++k) {
            weights[k] = mask_logits(k * f * f + sy * f + sx, i, j);
            peak = std::max(peak, weights[k]);
          }
          double total = 0.0, mix = 0.0;
          for (std::size_t k = 0; k < 9; ++k) {
            weights[k] = std::exp(weights[k] - peak);
            total += weights[k];
            mix += weights[k] * neighbours[k];
          }
          out(i * f + sy, j * f + sx) = static_cast<float>(static_cast<double>(f) * mix / total);
        }
    }
  return out;
}

// Nearest-neighbour replication of 4 * d; convex upsampling with one-hot
// centre weights.
inline Tensor replicate_upsample(const Tensor& disparity) {
  require_rank(disparity, 2, "replicate_upsample");
  constexpr std::size_t f = kUpsampleFactor;
  Tensor out({disparity.dim(0) * f, disparity.dim(1) * f});
  for (std::size_t y = 0; y < out.dim(0); ++y)
    for (std::size_t x = 0; x < out.dim(1); ++x) out(y, x) = static_cast<float>(f) * disparity(y / f, x / f);
  return out;
}

// ---------------------------------------------------------------------------
// Update blocks

inline void add_update_block_weights(WeightBundle& bundle, const std::string& prefix, std::size_t lookup_channels,
                                     const EngineConfig& cfg, std::uint64_t seed) {
  const std::size_t hc = cfg.encoder.hidden_channels;
  add_conv_weights(bundle, prefix + ".enc_corr", cfg.corr_channels, lookup_channels, 1, seed);
  add_conv_weights(bundle, prefix + ".enc_disp", cfg.disp_channels, 1, 3, seed);
  const std::array<std::size_t, 3> x_channels = {cfg.corr_channels + cfg.disp_channels + hc, 2 * hc, hc};
  for (std::size_t l = 0; l < 3; ++l) {
    for (const char* gate : {".z", ".r", ".h"}) {
      add_conv_weights(bundle, prefix + ".gru" + std::to_string(kContextStrides[l]) + gate, hc, hc + x_channels[l], 3,
                       seed);
    }
  }
  add_conv_weights(bundle, prefix + ".head.conv1", hc, hc, 3, seed);
  add_conv_weights(bundle, prefix + ".head.conv2", 1, hc, 3, seed);
  add_conv_weights(bundle, prefix + ".mask", kMaskChannels, hc, 3, seed);
}

// Full model: encoders plus both update blocks.
inline WeightBundle generate_model_weights(const EngineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  WeightBundle bundle;
  bundle.seed = seed;
  add_encoder_weights(bundle, cfg.encoder, seed);
  add_update_block_weights(bundle, "su", cfg.lookup.scale_channels(), cfg, seed);
  add_update_block_weights(bundle, "du", cfg.lookup.pyramid_channels(), cfg, seed);
  return bundle;
}

struct UpdateBlockOutput {
  Tensor head;         // 1 x h x w raw head output
  Tensor mask_logits;  // 144 x h x w
};

// h x w x K lookup result -> K x h x w
inline Tensor channels_first(const Tensor& lookup) {
  require_rank(lookup, 3, "channels_first");
  const std::size_t h = lookup.dim(0), w = lookup.dim(1), k = lookup.dim(2);
  Tensor out({k, h, w});
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < k; ++c) out[c * h * w + p] = lookup[p * k + c];
  return out;
}

// Runs the three GRUs coarse to fine, then the head and mask convs on the
// finest hidden state. Updates `hidden` in place.
inline UpdateBlockOutput run_update_block(std::array<Tensor, 3>& hidden, const ContextSet& context,
                                          const Tensor& lookup_features, const Tensor& disparity,
                                          const WeightBundle& weights, const std::string& prefix) {
  hidden[2] = gru_step(hidden[2], context.levels[2].gates, downsample2x(hidden[1]), weights, prefix + ".gru16").hidden;
  {
    const Tensor pooled = downsample2x(hidden[0]);
    const Tensor coarse = upsample2x(hidden[2]);
    hidden[1] =
        gru_step(hidden[1], context.levels[1].gates, concat_channels({&pooled, &coarse}), weights, prefix + ".gru8")
            .hidden;
  }
  {
    const Tensor corr = relu(ConvLayer::bind(weights, prefix + ".enc_corr")(channels_first(lookup_features)));
    Tensor disp_in = disparity;
    disp_in = std::move(disp_in).reshaped({1, disparity.dim(0), disparity.dim(1)});
    const Tensor disp = relu(ConvLayer::bind(weights, prefix + ".enc_disp")(disp_in));
    const Tensor coarse = upsample2x(hidden[1]);
    hidden[0] = gru_step(hidden[0], context.levels[0].gates, concat_channels({&corr, &disp, &coarse}), weights,
                         prefix + ".gru4")
                    .hidden;
  }
  UpdateBlockOutput out;
  out.head = ConvLayer::bind(weights, prefix + ".head.conv2")(relu(ConvLayer::bind(weights, prefix + ".head.conv1")(hidden[0])));
  out.mask_logits = ConvLayer::bind(weights, prefix + ".mask")(hidden[0]);
  return out;
}

// Reusable lookup plan and output buffers for one map shape.
struct LookupWorkspace {
  LookupPlan plan;
  Tensor pyramid_features;
  Tensor scale_features;

  LookupWorkspace(const LookupConfig& cfg, std::size_t h, std::size_t w)
      : plan(cfg, h, w), pyramid_features(plan.pyramid_shape()), scale_features(plan.scale_shape()) {}
};

struct StepResult {
  DisparityState state;
  Tensor update;       // h x w: predicted scale s (SU) or delta (DU)
  Tensor mask_logits;  // empty in oracle steps
};

inline void require_phase(const DisparityState& state, Phase expected, const char* what) {
  if (state.phase != expected) {
    throw PhaseError(std::string(what) + " called in phase " + to_string(state.phase) + ", expected " +
                     to_string(expected));
  }
}

// d' = max(s * d, eps) with s = exp(tanh(head) * ln 2), so s lies in [1/2, 2].
inline StepResult scale_update_step(const DisparityState& state, const CorrelationPyramid& pyr,
                                    const ContextSet& context, const WeightBundle& weights, const EngineConfig& cfg,
                                    LookupWorkspace* workspace = nullptr) {
  require_phase(state, Phase::ScaleUpdate, "scale_update_step");
  StepResult result{state, Tensor(state.disparity.shape()), {}};
  const Tensor* features = nullptr;
  Tensor direct;
  if (workspace) {
    workspace->plan.scale_lookup_into(pyr.finest(), state.disparity, workspace->scale_features);
    features = &workspace->scale_features;
  } else {
    direct = scale_lookup(pyr.finest(), state.disparity, cfg.lookup);
    features = &direct;
  }
  auto block = run_update_block(result.state.hidden, context, *features, state.disparity, weights, "su");
  constexpr float kLn2 = std::numbers::ln2_v<float>;
  for (std::size_t p = 0; p < state.disparity.size(); ++p) {
    const float s = std::exp(std::tanh(block.head[p]) * kLn2);
    result.update[p] = s;
    result.state.disparity[p] = std::max(s * state.disparity[p], cfg.eps);
  }
  result.mask_logits = std::move(block.mask_logits);
  ++result.state.iteration;
  return result;
}

// d' = max(d + delta, eps).
inline StepResult delta_update_step(const DisparityState& state, const CorrelationPyramid& pyr,
                                    const ContextSet& context, const WeightBundle& weights, const EngineConfig& cfg,
                                    LookupWorkspace* workspace = nullptr) {
  require_phase(state, Phase::DeltaUpdate, "delta_update_step");
  StepResult result{state, Tensor(state.disparity.shape()), {}};
  const Tensor* features = nullptr;
  Tensor direct;
  if (workspace) {
    workspace->plan.pyramid_lookup_into(pyr, state.disparity, workspace->pyramid_features);
    features = &workspace->pyramid_features;
  } else {
    direct = pyramid_lookup(pyr, state.disparity, cfg.lookup);
    features = &direct;
  }
  auto block = run_update_block(result.state.hidden, context, *features, state.disparity, weights, "du");
  for (std::size_t p = 0; p < state.disparity.size(); ++p) {
    result.update[p] = block.head[p];
    result.state.disparity[p] = std::max(state.disparity[p] + block.head[p], cfg.eps);
  }
  result.mask_logits = std::move(block.mask_logits);
  ++result.state.iteration;
  return result;
}

// ---------------------------------------------------------------------------
// Non-learned oracle steps

// Per pixel, picks the scale factor whose centre sample on the finest volume
// is largest; ties go to the factor closest to 1 in log space.
inline StepResult greedy_scale_step(const DisparityState& state, const Tensor& first_level, const EngineConfig& cfg) {
  require_phase(state, Phase::ScaleUpdate, "greedy_scale_step");
  check_lookup_inputs(first_level, state.disparity, "greedy_scale_step");
  const auto& factors = cfg.lookup.scale_factors;
  std::vector<std::size_t> order(factors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(std::log(factors[a])) < std::abs(std::log(factors[b]));
  });
  const std::size_t h = state.disparity.dim(0), w = state.disparity.dim(1), n = first_level.dim(2);
  StepResult result{state, Tensor(state.disparity.shape()), {}};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t p = i * w + j;
      const float* row = first_level.data() + p * n;
      const float d = state.disparity[p];
      float best_value = -std::numeric_limits<float>::infinity();
      float best_factor = 1.0f;
      for (std::size_t m : order) {
        const float v = sample_linear(row, n, scale_position(j, d, factors[m], 0.0f));
        if (v > best_value) {
          best_value = v;
          best_factor = factors[m];
        }
      }
      result.update[p] = best_factor;
      result.state.disparity[p] = std::max(best_factor * d, cfg.eps);
    }
  ++result.state.iteration;
  return result;
}

// Oracle delta step: snaps to the integer displacement within +-radius of
// round(d) with the largest finest-level correlation; ties go to the
// candidate closest to round(d).
inline StepResult greedy_delta_step(const DisparityState& state, const Tensor& first_level, const EngineConfig& cfg) {
  require_phase(state, Phase::DeltaUpdate, "greedy_delta_step");
  check_lookup_inputs(first_level, state.disparity, "greedy_delta_step");
  const std::size_t h = state.disparity.dim(0), w = state.disparity.dim(1), n = first_level.dim(2);
  StepResult result{state, Tensor(state.disparity.shape()), {}};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t p = i * w + j;
      const float* row = first_level.data() + p * n;
      const float d = state.disparity[p];
      const float centre = std::round(d);
      float best_value = -std::numeric_limits<float>::infinity();
      float best = d;
      for (int k = 0; k <= cfg.lookup.radius; ++k) {
        for (int sign : {1, -1}) {
          if (k == 0 && sign < 0) continue;
          const float candidate = centre + static_cast<float>(sign * k);
          if (candidate < 0.0f) continue;
          const float v = sample_linear(row, n, static_cast<float>(j) - candidate);
          if (v > best_value) {
            best_value = v;
            best = candidate;
          }
        }
      }
      result.update[p] = best - d;
      result.state.disparity[p] = std::max(best, cfg.eps);
    }
  ++result.state.iteration;
  return result;
}

// ---------------------------------------------------------------------------
// Full inference

struct InferenceResult {
  Tensor initial;                  // quarter-res d0
  std::vector<Tensor> full_res;    // one per iteration, 4h x 4w
  std::vector<Tensor> quarter_res; // one per iteration, h x w
  std::vector<Tensor> updates;     // predicted s or delta per iteration
  std::vector<Phase> phases;
};

inline InferenceResult run_inference(const Tensor& left, const Tensor& right, const DepthEstimate& depth,
                                     const WeightBundle& weights, const EngineConfig& cfg, Mode mode) {
  cfg.validate();
  check_image(left, "run_inference left");
  check_image(right, "run_inference right");
  if (left.shape() != right.shape()) throw ShapeError("run_inference: left/right shapes differ");
  const std::size_t h = left.dim(1) / 4, w = left.dim(2) / 4;
  if (depth.z.shape() != Shape{h, w}) {
    throw ShapeError("run_inference: depth is " + to_string(depth.z.shape()) + ", expected quarter resolution " +
                     to_string(Shape{h, w}));
  }

  const FeaturePair features = mode == Mode::Learned ? encode_matching(left, right, weights) : encode_patches(left, right);
  const CorrelationPyramid pyr = build_pyramid(build_correlation(features), cfg.lookup.num_levels);

  DisparityState state;
  state.disparity = init_disparity(depth, w, cfg.eta, cfg.eps);
  std::optional<ContextSet> context;
  if (mode == Mode::Learned) {
    context = encode_context(left, weights);
    for (std::size_t l = 0; l < 3; ++l) state.hidden[l] = context->levels[l].hidden;
  }
  LookupWorkspace workspace(cfg.lookup, h, w);

  InferenceResult out;
  out.initial = state.disparity;
  for (int n = 0; n < cfg.total_iters; ++n) {
    state.phase = n < cfg.su_iters ? Phase::ScaleUpdate : Phase::DeltaUpdate;
    StepResult step = [&] {
      if (mode == Mode::Oracle) {
        return state.phase == Phase::ScaleUpdate ? greedy_scale_step(state, pyr.finest(), cfg)
                                                 : greedy_delta_step(state, pyr.finest(), cfg);
      }
      return state.phase == Phase::ScaleUpdate ? scale_update_step(state, pyr, *context, weights, cfg, &workspace)
                                               : delta_update_step(state, pyr, *context, weights, cfg, &workspace);
    }();
    state = std::move(step.state);
    out.full_res.push_back(mode == Mode::Learned ? convex_upsample(state.disparity, step.mask_logits)
                                                 : replicate_upsample(state.disparity));
    out.quarter_res.push_back(state.disparity);
    out.updates.push_back(std::move(step.update));
    out.phases.push_back(state.phase);
  }
  return out;
}

}  // namespace defom
