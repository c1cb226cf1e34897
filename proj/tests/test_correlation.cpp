#include <gtest/gtest.h>

#include <algorithm>

#include "defom/correlation.hpp"
#include "oracles.hpp"

using namespace defom;

namespace {

// c == w features whose column j is the standard basis vector e_j.
Tensor basis_features(std::size_t h, std::size_t w) {
  Tensor f({w, h, w}, 0.0f);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) f(j, i, j) = 1.0f;
  return f;
}

// Right features whose column k carries e_{k + shift}, so left column j
// matches right column j - shift exactly.
Tensor shifted_basis(std::size_t h, std::size_t w, std::size_t shift) {
  Tensor f({w, h, w}, 0.0f);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t k = 0; k + shift < w; ++k) f(k + shift, i, k) = 1.0f;
  return f;
}

}  // namespace

TEST(BuildCorrelation, OrthonormalColumnsGiveIdentity) {
  const Tensor f = basis_features(2, 5);
  const Tensor c = build_correlation(f, f);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(c(i, j, k), j == k ? 1.0f : 0.0f);
}

TEST(BuildCorrelation, ZeroFeaturesGiveZeroVolume) {
  const Tensor z({4, 3, 6}, 0.0f);
  EXPECT_EQ(build_correlation(z, z), Tensor({3, 6, 6}, 0.0f));
}

TEST(BuildCorrelation, MatchesTripleLoop) {
  Rng rng(31);
  const Tensor l = oracle::random_tensor({2, 2, 3}, rng);
  const Tensor r = oracle::random_tensor({2, 2, 3}, rng);
  const Tensor c = build_correlation(l, r);
  const auto expected = oracle::correlation(l, r);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 3}));
  for (std::size_t p = 0; p < c.size(); ++p) EXPECT_NEAR(c[p], expected[p], 1e-6);
}

TEST(BuildCorrelation, TransposeSymmetryIsExact) {
  Rng rng(32);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor f = oracle::random_tensor({7, 3, 9}, rng);
    const Tensor g = oracle::random_tensor({7, 3, 9}, rng);
    const Tensor fg = build_correlation(f, g), gf = build_correlation(g, f);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 9; ++j)
        for (std::size_t k = 0; k < 9; ++k) ASSERT_EQ(fg(i, j, k), gf(i, k, j));
  }
}

TEST(BuildCorrelation, ShapeMismatchThrows) {
  EXPECT_THROW((void)build_correlation(Tensor({2, 3, 4}), Tensor({2, 3, 5})), ShapeError);
  EXPECT_THROW((void)build_correlation(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(BuildPyramid, LevelShapes) {
  const CorrelationPyramid two = build_pyramid(Tensor({1, 4, 4}, 1.0f), 2);
  ASSERT_EQ(two.num_levels(), 2u);
  EXPECT_EQ(two.levels[0].dim(2), 4u);
  EXPECT_EQ(two.levels[1].dim(2), 2u);

  Rng rng(1);
  const Tensor c1 = oracle::random_tensor({2, 3, 5}, rng);
  const CorrelationPyramid one = build_pyramid(c1, 1);
  ASSERT_EQ(one.num_levels(), 1u);
  EXPECT_EQ(one.levels[0], c1);
}

TEST(BuildPyramid, SecondLevelMatchesPoolingLoop) {
  Rng rng(33);
  const Tensor c1 = oracle::random_tensor({3, 7, 7}, rng);
  const CorrelationPyramid pyr = build_pyramid(c1, 3);
  const auto expected = oracle::pool_last(c1);
  ASSERT_EQ(pyr.levels[1].size(), expected.size());
  for (std::size_t p = 0; p < expected.size(); ++p) EXPECT_NEAR(pyr.levels[1][p], expected[p], 1e-7);
  for (std::size_t l = 0; l + 1 < pyr.num_levels(); ++l) EXPECT_EQ(pyr.levels[l + 1], avg_pool_last(pyr.levels[l]));
}

TEST(BuildPyramid, Errors) {
  EXPECT_THROW((void)build_pyramid(Tensor({1, 4, 4}), 0), ConfigError);
  EXPECT_THROW((void)build_pyramid(Tensor({1, 4, 4}), 4), ShapeError);
}

TEST(LookupConfig, Validation) {
  EXPECT_NO_THROW(LookupConfig{}.validate());
  EXPECT_THROW((LookupConfig{0, 2, {1.0f}}.validate()), ConfigError);
  EXPECT_THROW((LookupConfig{4, 2, {}}.validate()), ConfigError);
  EXPECT_THROW((LookupConfig{4, 2, {1.0f, 0.5f}}.validate()), ConfigError);
  EXPECT_THROW((LookupConfig{4, 2, {-1.0f, 0.5f}}.validate()), ConfigError);
}

TEST(PyramidLookup, ChannelCountAndLayout) {
  const LookupConfig cfg;
  EXPECT_EQ(cfg.pyramid_channels(), 18u);
  Rng rng(34);
  const CorrelationPyramid pyr = build_pyramid(oracle::random_tensor({2, 16, 16}, rng), 2);
  Tensor d({2, 16});
  for (float& v : d.values()) v = static_cast<float>(rng.uniform(0, 10));
  const Tensor out = pyramid_lookup(pyr, d, cfg);
  ASSERT_EQ(out.shape(), (Shape{2, 16, 18}));
  // enumerate the index of every channel and compare against per-element sampling
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      for (int l = 0; l < 2; ++l)
        for (int o = -4; o <= 4; ++o) {
          const double pos = (static_cast<double>(j) - d(i, j)) / (1 << l) + o;
          const auto ch = static_cast<std::size_t>(l * 9 + o + 4);
          EXPECT_NEAR(out(i, j, ch), oracle::sample(pyr.levels[static_cast<std::size_t>(l)], i, j, pos), 1e-5);
        }
}

TEST(PyramidLookup, CentreSampleAtExactMatchIsOne) {
  const std::size_t w = 12, shift = 3;
  const CorrelationPyramid pyr = build_pyramid(build_correlation(basis_features(2, w), shifted_basis(2, w, shift)), 2);
  const Tensor d({2, w}, static_cast<float>(shift));
  const Tensor out = pyramid_lookup(pyr, d, LookupConfig{});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = shift; j < w; ++j) {
      EXPECT_EQ(out(i, j, 4), 1.0f);
      for (std::size_t o = 0; o < 9; ++o) {
        if (o != 4) {
          EXPECT_EQ(out(i, j, o), 0.0f);
        }
      }
    }
}

TEST(PyramidLookup, IntegerPositionsMatchDirectIndexing) {
  Rng rng(35);
  const LookupConfig cfg{3, 3, {1.0f}};
  const CorrelationPyramid pyr = build_pyramid(oracle::random_tensor({2, 16, 16}, rng), 3);
  Tensor d({2, 16});
  // j - d divisible by 4 makes every level's position an integer
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 16; ++j) d(i, j) = static_cast<float>(j % 4 + 4 * rng.below(3));
  const Tensor out = pyramid_lookup(pyr, d, cfg);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      for (int l = 0; l < 3; ++l)
        for (int o = -3; o <= 3; ++o) {
          const long pos = (static_cast<long>(j) - static_cast<long>(d(i, j))) / (1 << l) + o;
          const auto& level = pyr.levels[static_cast<std::size_t>(l)];
          const float expected = (pos < 0 || pos >= static_cast<long>(level.dim(2)))
                                     ? 0.0f
                                     : level(i, j, static_cast<std::size_t>(pos));
          EXPECT_EQ(out(i, j, static_cast<std::size_t>(l * 7 + o + 3)), expected);
        }
}

TEST(PyramidLookup, FourLevelSearchRange) {
  const LookupConfig cfg{4, 4, {1.0f}};
  // stride-4 features, coarsest level pooled three times, radius 4 (input-image pixels)
  EXPECT_EQ(pyramid_search_range(cfg), 128);
  EXPECT_EQ(pyramid_search_range(cfg), 4 * 8 * 4);
  EXPECT_EQ(pyramid_search_range(LookupConfig{}), 32);
}

TEST(PyramidLookup, Errors) {
  const CorrelationPyramid pyr = build_pyramid(Tensor({2, 8, 8}, 0.0f), 1);
  EXPECT_THROW((void)pyramid_lookup(pyr, Tensor({2, 8}), LookupConfig{}), ConfigError);
  const CorrelationPyramid pyr2 = build_pyramid(Tensor({2, 8, 8}, 0.0f), 2);
  EXPECT_THROW((void)pyramid_lookup(pyr2, Tensor({3, 8}), LookupConfig{}), ShapeError);
}

TEST(ScaleLookup, TwentyFourValuesPerPixel) {
  const LookupConfig cfg;
  EXPECT_EQ(cfg.scale_channels(), 24u);
  const Tensor out = scale_lookup(Tensor({2, 8, 8}, 0.0f), Tensor({2, 8}, 1.0f), cfg);
  EXPECT_EQ(out.shape(), (Shape{2, 8, 24}));
}

TEST(ScaleLookup, CentrePositionsAtDisparityEight) {
  const LookupConfig cfg;
  const std::size_t j = 20;
  std::vector<float> probed;
  for (float s : cfg.scale_factors) probed.push_back(static_cast<float>(j) - scale_position(j, 8.0f, s, 0.0f));
  EXPECT_EQ(probed, (std::vector<float>{1, 2, 4, 6, 8, 10, 12, 16}));

  // the same through the sampler, using a ramp volume that encodes the position
  Tensor ramp({1, 24, 24});
  for (std::size_t k = 0; k < 24; ++k) ramp(0, j, k) = static_cast<float>(k);
  const Tensor out = scale_lookup(ramp, Tensor({1, 24}, 8.0f), cfg);
  for (std::size_t m = 0; m < 8; ++m) {
    EXPECT_EQ(out(0, j, 3 * m + 1), static_cast<float>(j) - probed[m]);
    EXPECT_EQ(out(0, j, 3 * m + 0), static_cast<float>(j) - probed[m] + 1);
    EXPECT_EQ(out(0, j, 3 * m + 2), static_cast<float>(j) - probed[m] - 1);
  }
}

TEST(ScaleLookup, MaximumSitsInHalfFactorTriplet) {
  const std::size_t w = 24, truth = 4;
  const Tensor c1 = build_correlation(basis_features(1, w), shifted_basis(1, w, truth));
  const LookupConfig cfg;
  const Tensor out = scale_lookup(c1, Tensor({1, w}, 8.0f), cfg);
  for (std::size_t j = 16; j < w; ++j) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 24; ++k)
      if (out(0, j, k) > out(0, j, best)) best = k;
    EXPECT_EQ(best / 3, 2u) << "column " << j;  // factor 4/8
    EXPECT_EQ(out(0, j, best), 1.0f);
  }
}

TEST(ScaleLookup, IntegerPositionsMatchDirectIndexing) {
  Rng rng(36);
  const LookupConfig cfg;
  const Tensor c1 = oracle::random_tensor({2, 32, 32}, rng);
  Tensor d({2, 32});
  for (float& v : d.values()) v = static_cast<float>(8 * rng.below(4));  // s * d integral for every factor
  const Tensor out = scale_lookup(c1, d, cfg);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 32; ++j)
      for (std::size_t m = 0; m < 8; ++m)
        for (int delta = -1; delta <= 1; ++delta) {
          const long pos = static_cast<long>(j) - std::lround(cfg.scale_factors[m] * d(i, j)) - delta;
          const float expected = (pos < 0 || pos >= 32) ? 0.0f : c1(i, j, static_cast<std::size_t>(pos));
          EXPECT_EQ(out(i, j, 3 * m + static_cast<std::size_t>(delta + 1)), expected);
        }
}

TEST(ScaleLookup, UnitFactorMatchesRadiusOnePyramid) {
  Rng rng(37);
  const Tensor c1 = oracle::random_tensor({3, 20, 20}, rng);
  Tensor d({3, 20});
  for (float& v : d.values()) v = static_cast<float>(rng.uniform(0, 12));
  const Tensor sl = scale_lookup(c1, d, LookupConfig{4, 2, {1.0f}});
  const Tensor pl = pyramid_lookup(build_pyramid(c1, 1), d, LookupConfig{1, 1, {1.0f}});
  for (std::size_t p = 0; p < 3 * 20; ++p) {
    // SL orders delta -1..1, i.e. positions descending; PL orders offsets ascending
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(sl[p * 3 + t], pl[p * 3 + (2 - t)], 1e-5);
  }
}

TEST(ScaleLookup, LargestFactorReachesWholeRow) {
  const LookupConfig cfg;
  for (std::size_t w : {16u, 40u, 64u}) {
    const float d = static_cast<float>(w) / 2;
    float reach = 0.0f;
    for (float s : cfg.scale_factors)
      for (int delta = -1; delta <= 1; ++delta) {
        const std::size_t j = w - 1;
        reach = std::max(reach, static_cast<float>(j) - scale_position(j, d, s, static_cast<float>(delta)));
      }
    EXPECT_GE(reach, static_cast<float>(w - 1));
  }
}

TEST(LookupPlan, BitwiseEqualToDirectPath) {
  Rng rng(38);
  const LookupConfig cfg;
  const std::size_t h = 6, w = 24;
  const Tensor c1 = oracle::random_tensor({h, w, w}, rng);
  const CorrelationPyramid pyr = build_pyramid(c1, cfg.num_levels);
  const LookupPlan plan(cfg, h, w);
  Tensor pl(plan.pyramid_shape()), sl(plan.scale_shape());
  for (int state = 0; state < 10; ++state) {
    Tensor d({h, w});
    for (float& v : d.values()) v = static_cast<float>(rng.uniform(0, 20));
    plan.pyramid_lookup_into(pyr, d, pl);
    plan.scale_lookup_into(c1, d, sl);
    EXPECT_EQ(pl, pyramid_lookup(pyr, d, cfg));
    EXPECT_EQ(sl, scale_lookup(c1, d, cfg));
  }
}

TEST(LookupPlan, LookupsDoNotAllocate) {
  Rng rng(39);
  const LookupConfig cfg;
  const Tensor c1 = oracle::random_tensor({4, 16, 16}, rng);
  const CorrelationPyramid pyr = build_pyramid(c1, cfg.num_levels);
  const LookupPlan plan(cfg, 4, 16);
  Tensor pl(plan.pyramid_shape()), sl(plan.scale_shape());
  const Tensor d({4, 16}, 3.5f);
  const auto before = tensor_allocations();
  for (int it = 0; it < 32; ++it) {
    plan.pyramid_lookup_into(pyr, d, pl);
    plan.scale_lookup_into(c1, d, sl);
  }
  EXPECT_EQ(tensor_allocations(), before);
}

TEST(LookupPlan, RejectsMismatchedBuffers) {
  const LookupPlan plan(LookupConfig{}, 4, 16);
  const CorrelationPyramid pyr = build_pyramid(Tensor({4, 16, 16}, 0.0f), 2);
  Tensor wrong({4, 16, 5});
  EXPECT_THROW(plan.pyramid_lookup_into(pyr, Tensor({4, 16}), wrong), ShapeError);
  Tensor pl(plan.pyramid_shape());
  EXPECT_THROW(plan.pyramid_lookup_into(pyr, Tensor({4, 15}), pl), ShapeError);
  EXPECT_THROW(plan.pyramid_lookup_into(build_pyramid(Tensor({4, 16, 16}), 1), Tensor({4, 16}), pl), ConfigError);
}
