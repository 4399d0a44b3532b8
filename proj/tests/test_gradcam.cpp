#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "xmed/gradcam.hpp"

using namespace xmed;

namespace {

Tensor random_map(Shape4 s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  return xmed::testing::random_tensor(s, rng, lo, hi).cast<float>();
}

Image8 random_image8(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image8 img(h, w, c);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

}  // namespace

TEST(CamWeights, Examples) {
  for (double v : cam_weights(Tensor({1, 3, 2, 2}, 1.0f))) EXPECT_EQ(v, 1.0);
  for (double v : cam_weights(Tensor({1, 3, 2, 2}))) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(cam_weights(Tensor({1, 1, 2, 2}, std::vector<float>{1, 3, 5, 7})), std::vector<double>{4.0});
  EXPECT_THROW(cam_weights(Tensor({2, 1, 2, 2})), ShapeError);
}

TEST(CamMap, Examples) {
  const std::vector<double> one{1.0};
  EXPECT_EQ(cam_map(Tensor({1, 1, 2, 2}, std::vector<float>{1, -1, 2, 0}), one), Grid(2, 2, {1, 0, 2, 0}));
  const std::vector<double> negative{-0.5, 0.0};
  const Grid dead = cam_map(random_map({1, 2, 3, 3}, 1, 0, 1), negative);
  for (double v : dead.values) EXPECT_EQ(v, 0.0);
  const Tensor a = random_map({1, 3, 4, 4}, 2);
  const std::vector<double> alpha{0.5, -0.2, 0.9};
  const std::vector<double> scaled{1.5, -0.6, 2.7};
  const Grid base = cam_map(a, alpha);
  const Grid big = cam_map(a, scaled);
  for (std::size_t i = 0; i < base.values.size(); ++i) EXPECT_NEAR(big.values[i], 3.0 * base.values[i], 1e-12);
  EXPECT_THROW(cam_map(a, one), ShapeError);
}

TEST(Normalize, Examples) {
  EXPECT_EQ(normalize(Grid(2, 2, {1, 0, 2, 0})).grid, Grid(2, 2, {0.5, 0, 1, 0}));
  EXPECT_EQ(normalize(Grid(3, 3)).grid, Grid(3, 3));
  EXPECT_EQ(normalize(Grid(2, 3, 0.7)).grid, Grid(2, 3, 1.0));
}

TEST(Upsample, Examples) {
  EXPECT_EQ(upsample_bilinear(Grid(1, 1, 0.3), 5, 7), Grid(5, 7, 0.3));
  const Grid g(2, 3, {0.1, 0.5, 0.9, 0.2, 0.4, 0.0});
  EXPECT_EQ(upsample_bilinear(g, 2, 3), g);
  const Grid row = upsample_bilinear(Grid(1, 2, {0, 1}), 1, 4);
  ASSERT_EQ(row.values.size(), 4u);
  EXPECT_NEAR(row.values[0], 0.0, 1e-15);
  EXPECT_NEAR(row.values[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(row.values[2], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(row.values[3], 1.0, 1e-15);
}

TEST(Upsample, ReproducesCornersExactly) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    Grid g(2 + trial % 5, 2 + trial % 3);
    for (auto& v : g.values) v = unit(rng);
    const Grid up = upsample_bilinear(g, 17 + trial, 9 + trial);
    EXPECT_EQ(up.at(0, 0), g.at(0, 0));
    EXPECT_EQ(up.at(0, up.width - 1), g.at(0, g.width - 1));
    EXPECT_EQ(up.at(up.height - 1, 0), g.at(g.height - 1, 0));
    EXPECT_EQ(up.at(up.height - 1, up.width - 1), g.at(g.height - 1, g.width - 1));
  }
}

TEST(Colormap, ControlPoints) {
  EXPECT_EQ(colormap(0.0), (Rgb{0, 0, 255}));
  EXPECT_EQ(colormap(0.25), (Rgb{0, 255, 255}));
  EXPECT_EQ(colormap(0.5), (Rgb{0, 255, 0}));
  EXPECT_EQ(colormap(0.75), (Rgb{255, 255, 0}));
  EXPECT_EQ(colormap(1.0), (Rgb{255, 0, 0}));
  // Halfway from blue to cyan: 127.5 rounds up.
  EXPECT_EQ(colormap(0.125), (Rgb{0, 128, 255}));
  EXPECT_EQ(colormap(-1.0), colormap(0.0));
  EXPECT_EQ(colormap(2.0), colormap(1.0));
}

TEST(Overlay, Examples) {
  const Image8 gray = random_image8(5, 6, 1, 4);
  const Grid heat = upsample_bilinear(Grid(2, 2, {0, 0.3, 0.8, 1}), 5, 6);
  const Image8 same = overlay(gray, heat, 0.0);
  ASSERT_EQ(same.channels, 3u);
  for (std::size_t y = 0; y < 5; ++y) {
    for (std::size_t x = 0; x < 6; ++x) {
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(same.at(y, x, c), gray.at(y, x));
    }
  }
  const Image8 rgb = random_image8(4, 4, 3, 5);
  EXPECT_EQ(overlay(rgb, Grid(4, 4, 0.2), 0.0), rgb);

  const Image8 red = overlay(rgb, Grid(4, 4, 1.0), 1.0);
  for (std::size_t i = 0; i < red.pixels.size(); i += 3) {
    EXPECT_EQ(red.pixels[i], 255);
    EXPECT_EQ(red.pixels[i + 1], 0);
    EXPECT_EQ(red.pixels[i + 2], 0);
  }
  const Image8 green = overlay(rgb, Grid(4, 4, 0.5), 1.0);
  EXPECT_EQ(green.at(2, 1, 0), 0);
  EXPECT_EQ(green.at(2, 1, 1), 255);
  EXPECT_EQ(green.at(2, 1, 2), 0);

  // 0.6 * 100 + 0.4 * 255 = 162 exactly; 0.5 * 101 + 0.5 * 0 = 50.5 rounds to 51.
  Image8 flat(1, 1, 3, 100);
  EXPECT_EQ(overlay(flat, Grid(1, 1, 1.0), 0.4).pixels, (std::vector<std::uint8_t>{162, 60, 60}));
  Image8 odd(1, 1, 1, 101);
  EXPECT_EQ(overlay(odd, Grid(1, 1, 1.0), 0.5).pixels, (std::vector<std::uint8_t>{178, 51, 51}));

  EXPECT_THROW(overlay(rgb, Grid(3, 4), 0.5), ShapeError);
}

TEST(Pipeline, PositiveScaleInvariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor a = random_map({1, 4, 5, 5}, seed, 0, 2);
    const Tensor g = random_map({1, 4, 5, 5}, seed + 100);
    const Heatmap base = normalize(cam_map(a, cam_weights(g)));
    for (float c : {0.01f, 3.0f, 250.0f}) {
      Tensor ca = a, cg = g;
      ca *= c;
      cg *= c;
      const Heatmap scaled = normalize(cam_map(ca, cam_weights(cg)));
      for (std::size_t i = 0; i < base.grid.values.size(); ++i) {
        EXPECT_NEAR(scaled.grid.values[i], base.grid.values[i], 1e-6);
      }
    }
  }
}

TEST(Explain, RangeBiasInvarianceAndDeterminism) {
  for (bool dense : {false, true}) {
    Model m = dense ? build_densenet_mini({2, 2}, 4, 2, {1, 32, 32}, 6) : build_resnet_mini({1, 1}, 4, 2, {1, 32, 32}, 6);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Tensor img = random_map({1, 1, 32, 32}, seed, 0, 255);
      const Explanation ex = explain(m, img, 0);
      EXPECT_EQ(ex.heatmap.source_layer, m.capture_layer());
      EXPECT_EQ(ex.upsampled.height, 32u);
      EXPECT_EQ(ex.overlay.width, 32u);
      double top = 0;
      for (double v : ex.heatmap.grid.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        top = std::max(top, v);
      }
      EXPECT_TRUE(top == 0.0 || top == 1.0);
      for (double v : ex.upsampled.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }

      Model shifted = m;
      for (auto& b : shifted.param("fc.bias").value.values()) b += 0.75f;
      EXPECT_EQ(explain(shifted, img, 0).heatmap.grid, ex.heatmap.grid);
      EXPECT_EQ(explain(m, img, 0).overlay, ex.overlay);
    }
  }
}

TEST(Explain, DefaultsToPredictedClass) {
  const Model m = build_resnet_mini({1}, 4, 3, {1, 16, 16}, 7);
  const Tensor img = random_map({1, 1, 16, 16}, 8, 0, 255);
  const Explanation ex = explain(m, img);
  const auto best = std::max_element(ex.probabilities.begin(), ex.probabilities.end()) - ex.probabilities.begin();
  EXPECT_EQ(ex.class_index, static_cast<std::size_t>(best));
  EXPECT_EQ(ex.probabilities.size(), 3u);
  EXPECT_THROW(explain(m, img, 3), InputError);
  EXPECT_THROW(explain(m, Tensor({1, 1, 8, 8})), ShapeError);
}
