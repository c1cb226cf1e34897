#pragma once

// Stereo error metrics, the sequence loss, and relative-depth analysis
// (least-squares affine alignment and ratio-map spread).

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "defom/tensor.hpp"

namespace defom {

struct EmptyMaskError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename T>
void check_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const Mask& mask, const char* what) {
  if (a.shape() != b.shape() || mask.shape() != a.shape()) {
    throw ShapeError(std::string(what) + ": shapes differ " + to_string(a.shape()) + ", " + to_string(b.shape()) +
                     ", mask " + to_string(mask.shape()));
  }
}

inline std::size_t count_valid(const Mask& mask) {
  std::size_t n = 0;
  for (auto v : mask.values()) n += v != 0;
  return n;
}

struct MetricReport {
  double epe = 0.0;
  std::map<double, double> bad;  // threshold -> percentage of valid pixels with error > threshold
  double d1 = 0.0;               // percentage with error > 3 px and > 5% of ground truth
  std::size_t valid_pixels = 0;
  std::size_t total_pixels = 0;
};

inline std::string format_threshold(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

// One `key=value` per line: epe, bad<t>, d1, valid_pixels, total_pixels.
inline std::string to_key_value(const MetricReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "epe=" << r.epe << '\n';
  for (const auto& [t, pct] : r.bad) os << "bad" << format_threshold(t) << '=' << pct << '\n';
  os << "d1=" << r.d1 << '\n';
  os << "valid_pixels=" << r.valid_pixels << '\n';
  os << "total_pixels=" << r.total_pixels << '\n';
  return os.str();
}

// {"epe", "bad": {"<t>": pct}, "d1", "valid_pixels", "total_pixels"}
inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json bad = nlohmann::json::object();
  for (const auto& [t, pct] : r.bad) bad[format_threshold(t)] = pct;
  return {{"epe", r.epe}, {"bad", bad}, {"d1", r.d1}, {"valid_pixels", r.valid_pixels},
          {"total_pixels", r.total_pixels}};
}

template <typename T>
MetricReport compute_metrics(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const Mask& mask,
                             const std::vector<double>& thresholds = {1.0, 2.0, 3.0}) {
  check_same_shape(pred, gt, mask, "compute_metrics");
  MetricReport r;
  r.total_pixels = mask.size();
  std::map<double, std::size_t> over;
  for (double t : thresholds) over[t] = 0;
  std::size_t outliers = 0;
  double sum = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    const double err = std::abs(static_cast<double>(pred[p]) - static_cast<double>(gt[p]));
    ++r.valid_pixels;
    sum += err;
    for (auto& [t, n] : over) n += err > t;
    outliers += err > 3.0 && err > 0.05 * std::abs(static_cast<double>(gt[p]));
  }
  if (r.valid_pixels == 0) throw EmptyMaskError("compute_metrics: validity mask is empty");
  const auto pct = [&](std::size_t n) { return 100.0 * static_cast<double>(n) / static_cast<double>(r.valid_pixels); };
  r.epe = sum / static_cast<double>(r.valid_pixels);
  for (const auto& [t, n] : over) r.bad[t] = pct(n);
  r.d1 = pct(outliers);
  return r;
}

template <typename T>
double mean_abs_error(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const Mask& mask) {
  return compute_metrics(pred, gt, mask, {}).epe;
}

// sum_n gamma^(N-n) * mean_mask |gt - pred_n|, with 0^0 = 1.
template <typename T>
double sequence_loss(const std::vector<BasicTensor<T>>& preds, const BasicTensor<T>& gt, const Mask& mask,
                     double gamma = 0.9) {
  if (preds.empty()) throw std::invalid_argument("sequence_loss: need at least one prediction");
  const std::size_t n = preds.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += std::pow(gamma, static_cast<double>(n - 1 - i)) * mean_abs_error(preds[i], gt, mask);
  }
  return loss;
}

struct AffineFit {
  double scale = 0.0;
  double shift = 0.0;
  double epe = 0.0;  // mean |scale * z + shift - gt| over the mask
  bool degenerate = false;
};

// Least-squares (scale, shift) minimising sum (scale * z + shift - gt)^2 over
// the mask. When z has (near) zero variance: scale 0, shift mean(gt).
template <typename T>
AffineFit affine_align(const BasicTensor<T>& z, const BasicTensor<T>& gt, const Mask& mask) {
  check_same_shape(z, gt, mask, "affine_align");
  const std::size_t n = count_valid(mask);
  if (n < 2) throw EmptyMaskError("affine_align: need at least 2 valid pixels");
  double mean_z = 0.0, mean_g = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    mean_z += static_cast<double>(z[p]);
    mean_g += static_cast<double>(gt[p]);
  }
  mean_z /= static_cast<double>(n);
  mean_g /= static_cast<double>(n);
  double var_z = 0.0, cov = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    const double dz = static_cast<double>(z[p]) - mean_z;
    var_z += dz * dz;
    cov += dz * (static_cast<double>(gt[p]) - mean_g);
  }
  var_z /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  AffineFit fit;
  if (var_z < 1e-12) {
    fit.degenerate = true;
    fit.scale = 0.0;
    fit.shift = mean_g;
  } else {
    fit.scale = cov / var_z;
    fit.shift = mean_g - fit.scale * mean_z;
  }
  double err = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p]) err += std::abs(fit.scale * static_cast<double>(z[p]) + fit.shift - static_cast<double>(gt[p]));
  }
  fit.epe = err / static_cast<double>(n);
  return fit;
}

template <typename T>
BasicTensor<T> apply_affine(const BasicTensor<T>& z, const AffineFit& fit) {
  BasicTensor<T> out(z.shape());
  for (std::size_t p = 0; p < z.size(); ++p) out[p] = static_cast<T>(fit.scale * static_cast<double>(z[p]) + fit.shift);
  return out;
}

template <typename T>
struct RatioMap {
  BasicTensor<T> ratio;  // 0 outside the mask
  double std = 0.0;      // population standard deviation over the mask
};

// r = gt / max(aligned, clamp_min)
template <typename T>
RatioMap<T> ratio_map_std(const BasicTensor<T>& gt, const BasicTensor<T>& aligned, const Mask& mask,
                          double clamp_min = 0.05) {
  check_same_shape(gt, aligned, mask, "ratio_map_std");
  const std::size_t n = count_valid(mask);
  if (n == 0) throw EmptyMaskError("ratio_map_std: validity mask is empty");
  RatioMap<T> out{BasicTensor<T>(gt.shape(), T(0)), 0.0};
  double mean = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    const double r = static_cast<double>(gt[p]) / std::max(static_cast<double>(aligned[p]), clamp_min);
    out.ratio[p] = static_cast<T>(r);
    mean += r;
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    const double r = static_cast<double>(gt[p]) / std::max(static_cast<double>(aligned[p]), clamp_min);
    var += (r - mean) * (r - mean);
  }
  out.std = std::sqrt(var / static_cast<double>(n));
  return out;
}

}  // namespace defom
