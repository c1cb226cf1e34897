#include <gtest/gtest.h>

#include "defom/depth_provider.hpp"
#include "defom/updater.hpp"
#include "oracles.hpp"

using namespace defom;

namespace {

Tensor positive_map(std::size_t h, std::size_t w, Rng& rng) { return oracle::random_tensor({h, w}, rng, 0.5, 20.0); }

PerturbSpec halves(std::size_t h, std::size_t w, double left, double right) {
  PerturbSpec spec;
  spec.regions.push_back({0, 0, w / 2, h, left});
  spec.regions.push_back({w / 2, 0, w, h, right});
  return spec;
}

}  // namespace

TEST(PerturbDepth, IdentitySpecReturnsGroundTruth) {
  Rng rng(51);
  const Tensor gt = positive_map(4, 6, rng);
  const DepthEstimate z = perturb_depth(gt, PerturbSpec::uniform(4, 6));
  EXPECT_EQ(z.z, gt);
  EXPECT_EQ(z.provenance, DepthEstimate::Provenance::SyntheticPerturbed);
}

TEST(PerturbDepth, RegionRatiosAreExact) {
  Rng rng(52);
  const Tensor gt = positive_map(4, 8, rng);
  const DepthEstimate z = perturb_depth(gt, halves(4, 8, 1.0, 3.0));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const double ratio = static_cast<double>(z.z(y, x)) / gt(y, x);
      EXPECT_NEAR(ratio, x < 4 ? 1.0 : 3.0, 1e-6);
      if (x < 4) {
        EXPECT_EQ(z.z(y, x), gt(y, x));
      }
    }
}

TEST(PerturbDepth, ShiftClampsAtZeroButAllZeroIsRejected) {
  const Tensor gt({1, 4}, std::vector<float>{1, 2, 3, 4});
  PerturbSpec spec = PerturbSpec::uniform(1, 4);
  spec.shift = -2.5;
  const DepthEstimate z = perturb_depth(gt, spec);
  EXPECT_EQ(z.z, Tensor({1, 4}, std::vector<float>{0, 0, 0.5f, 1.5f}));
  spec.shift = -10;
  EXPECT_THROW((void)perturb_depth(gt, spec), std::invalid_argument);
}

TEST(PerturbDepth, RegionsMustTileTheMap) {
  const Tensor gt({4, 4}, 1.0f);
  PerturbSpec gap;
  gap.regions.push_back({0, 0, 2, 4, 1.0});
  EXPECT_THROW((void)perturb_depth(gt, gap), std::invalid_argument);
  PerturbSpec overlap = halves(4, 4, 1, 2);
  overlap.regions.push_back({1, 1, 2, 2, 1.0});
  EXPECT_THROW((void)perturb_depth(gt, overlap), std::invalid_argument);
  EXPECT_THROW((void)perturb_depth(gt, halves(4, 4, 1, 0)), std::invalid_argument);
  EXPECT_THROW((void)perturb_depth(Tensor({1, 1}, -1.0f), PerturbSpec::uniform(1, 1)), std::invalid_argument);
}

TEST(PerturbDepth, NormalizationLeavesInitializationUnchanged) {
  Rng rng(53);
  const Tensor gt = positive_map(8, 16, rng);
  const PerturbSpec base = halves(8, 16, 0.5, 2.0);
  const Tensor d0 = init_disparity(perturb_depth(gt, base), 16, 0.5f, 0.05f);
  // power-of-two constants rescale without rounding: exact
  for (double c : {0.25, 2.0, 1024.0}) {
    PerturbSpec spec = base;
    spec.normalization = c;
    EXPECT_EQ(init_disparity(perturb_depth(gt, spec), 16, 0.5f, 0.05f), d0) << c;
  }
  // arbitrary constants: equal up to one float rounding of the product
  for (double c : {0.3, 7.77, 123.4}) {
    PerturbSpec spec = base;
    spec.normalization = c;
    const Tensor dc = init_disparity(perturb_depth(gt, spec), 16, 0.5f, 0.05f);
    for (std::size_t p = 0; p < d0.size(); ++p) EXPECT_NEAR(dc[p], d0[p], 1e-5 * d0[p]) << c;
  }
}

TEST(PerturbDepth, EqualScalesReproduceGroundTruthInitialization) {
  Rng rng(54);
  const Tensor gt = positive_map(8, 16, rng);
  const Tensor from_gt = init_disparity(gt, 16, 0.5f, 0.05f);
  for (double s : {0.5, 4.0}) {
    PerturbSpec spec = halves(8, 16, s, s);
    EXPECT_EQ(init_disparity(perturb_depth(gt, spec), 16, 0.5f, 0.05f), from_gt);
  }
}

TEST(LoadExternalDepth, QuarterResolutionIsTakenAsIs) {
  const Bytes pfm = write_pfm(Tensor({2, 3}, 5.0f));
  const DepthEstimate z = load_external_depth(pfm, 2, 3);
  EXPECT_EQ(z.z, Tensor({2, 3}, 5.0f));
  EXPECT_EQ(z.provenance, DepthEstimate::Provenance::ExternalFile);
}

TEST(LoadExternalDepth, FullResolutionIsBlockAveraged) {
  EXPECT_EQ(load_external_depth(write_pfm(Tensor({8, 12}, 8.0f)), 2, 3).z, Tensor({2, 3}, 8.0f));
  const Tensor block({2, 2}, std::vector<float>{1, 2, 3, 6});
  EXPECT_EQ(load_external_depth(write_pfm(block), 1, 1).z, Tensor({1, 1}, 3.0f));
  // 16-bit PNG input goes through the same path
  EXPECT_EQ(load_external_depth(write_disp_png16(Tensor({8, 8}, 2.5f)), 2, 2).z, Tensor({2, 2}, 2.5f));
}

TEST(LoadExternalDepth, Errors) {
  EXPECT_THROW((void)load_external_depth(write_pfm(Tensor({3, 3}, 1.0f)), 2, 2), ShapeError);
  EXPECT_THROW((void)load_external_depth(write_pfm(Tensor({4, 2}, 1.0f)), 2, 2), ShapeError);
  EXPECT_THROW((void)load_external_depth(write_pfm(Tensor({2, 2}, -1.0f)), 2, 2), std::invalid_argument);
  EXPECT_THROW((void)load_external_depth(Bytes{'x', 'y'}, 2, 2), FormatError);
  EXPECT_THROW((void)load_external_depth(std::filesystem::path("/nonexistent/depth.pfm"), 2, 2), IoError);
}
