#pragma once

// Relative inverse-depth sources: region-wise perturbations of ground-truth
// disparity that mimic a scale-inconsistent monocular estimate, and maps
// loaded from disk.

#include <string>
#include <vector>

#include "defom/dataio.hpp"
#include "defom/tensor.hpp"

namespace defom {

struct DepthEstimate {
  enum class Provenance { SyntheticPerturbed, ExternalFile };

  Tensor z;  // h x w, nonnegative
  Provenance provenance = Provenance::ExternalFile;
};

struct PerturbSpec {
  struct Region {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open [x0, x1) x [y0, y1)
    double scale = 1.0;
  };

  std::vector<Region> regions;
  double shift = 0.0;
  double normalization = 1.0;

  // Single region covering an h x w map.
  static PerturbSpec uniform(std::size_t h, std::size_t w, double scale = 1.0) {
    PerturbSpec spec;
    spec.regions.push_back({0, 0, w, h, scale});
    return spec;
  }

  // Region index per pixel; throws unless the regions tile the map exactly.
  [[nodiscard]] std::vector<std::size_t> region_map(std::size_t h, std::size_t w) const {
    if (!(normalization > 0.0)) throw std::invalid_argument("perturbation normalization must be positive");
    constexpr auto kUnassigned = static_cast<std::size_t>(-1);
    std::vector<std::size_t> owner(h * w, kUnassigned);
    for (std::size_t r = 0; r < regions.size(); ++r) {
      const Region& reg = regions[r];
      if (!(reg.scale > 0.0)) throw std::invalid_argument("region scales must be positive");
      if (reg.x0 >= reg.x1 || reg.y0 >= reg.y1 || reg.x1 > w || reg.y1 > h) {
        throw std::invalid_argument("region " + std::to_string(r) + " is empty or outside the " + std::to_string(h) +
                                    "x" + std::to_string(w) + " map");
      }
      for (std::size_t y = reg.y0; y < reg.y1; ++y)
        for (std::size_t x = reg.x0; x < reg.x1; ++x) {
          if (owner[y * w + x] != kUnassigned) throw std::invalid_argument("perturbation regions overlap");
          owner[y * w + x] = r;
        }
    }
    for (std::size_t o : owner)
      if (o == kUnassigned) throw std::invalid_argument("perturbation regions do not cover the map");
    return owner;
  }
};

// z = max(0, (scale(region) * d_gt + shift) * normalization)
inline DepthEstimate perturb_depth(const Tensor& d_gt, const PerturbSpec& spec) {
  require_rank(d_gt, 2, "perturb_depth");
  const std::size_t h = d_gt.dim(0), w = d_gt.dim(1);
  const auto owner = spec.region_map(h, w);
  DepthEstimate out{Tensor({h, w}), DepthEstimate::Provenance::SyntheticPerturbed};
  bool any_positive = false;
  for (std::size_t p = 0; p < h * w; ++p) {
    if (d_gt[p] < 0.0f) throw std::invalid_argument("perturb_depth: ground truth must be nonnegative");
    const double v = (spec.regions[owner[p]].scale * d_gt[p] + spec.shift) * spec.normalization;
    out.z[p] = static_cast<float>(std::max(0.0, v));
    any_positive = any_positive || out.z[p] > 0.0f;
  }
  if (!any_positive) throw std::invalid_argument("perturb_depth: perturbation produced an all-zero depth map");
  return out;
}

// Block mean by an integer factor on both axes.
inline Tensor block_mean(const Tensor& map, std::size_t factor) {
  require_rank(map, 2, "block_mean");
  if (factor == 0 || map.dim(0) % factor || map.dim(1) % factor) {
    throw ShapeError("block_mean: " + to_string(map.shape()) + " is not divisible by " + std::to_string(factor));
  }
  const std::size_t h = map.dim(0) / factor, w = map.dim(1) / factor;
  Tensor out({h, w});
  const double area = static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double sum = 0.0;
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) sum += map(y * factor + dy, x * factor + dx);
      out(y, x) = static_cast<float>(sum / area);
    }
  return out;
}

// Accepts PFM or 16-bit PNG at the target (quarter) resolution or at any
// integer multiple of it, e.g. full resolution; larger maps are block-averaged
// down. Invalid entries read as 0.
inline DepthEstimate load_external_depth(std::span<const std::uint8_t> bytes, std::size_t height, std::size_t width) {
  DisparityMap loaded = read_disparity(bytes);
  const Tensor& z = loaded.disparity;
  for (float v : z.values()) {
    if (v < 0.0f) throw std::invalid_argument("external depth contains negative values");
  }
  const std::size_t fh = z.dim(0) / height, fw = z.dim(1) / width;
  if (fh == 0 || fh != fw || z.dim(0) != fh * height || z.dim(1) != fw * width) {
    throw ShapeError("external depth is " + to_string(z.shape()) + ", expected " + std::to_string(height) + "x" +
                     std::to_string(width) + " or an integer multiple of it");
  }
  DepthEstimate out;
  out.provenance = DepthEstimate::Provenance::ExternalFile;
  out.z = fh == 1 ? std::move(loaded.disparity) : block_mean(z, fh);
  return out;
}

inline DepthEstimate load_external_depth(const std::filesystem::path& path, std::size_t height, std::size_t width) {
  return load_external_depth(read_file(path), height, width);
}

}  // namespace defom
