#include <doctest.h>

#include "rapforge/placement.hpp"
#include "test_support.hpp"

using namespace rapforge;
using rapforge::testing::rel_err;

TEST_CASE("degenerate radius pins the location to the origin") {
  Patch p = rapforge::testing::random_patch(8, 1);
  p.origin = {10, 20};
  p.placement_radius = 0;
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Placement pl = sample_placement(p, 64, 64, rng);
    CHECK(pl.location.row == 10);
    CHECK(pl.location.col == 20);
    CHECK(pl.scale == 8);
  }
}

TEST_CASE("degenerate scale range always draws that scale") {
  Patch p = rapforge::testing::random_patch(16, 2);
  p.scale_min = p.scale_max = 64;
  p.origin = {0, 0};
  p.placement_radius = 1000;
  Rng rng(4);
  for (int i = 0; i < 20; ++i) CHECK(sample_placement(p, 384, 480, rng).scale == 64);
}

TEST_CASE("huge radius covers the whole clamped support") {
  // Chi-square-style uniformity over coarse bins of the valid top-left
  // rectangle; clamping piles extra mass on the border bins, so the check
  // covers presence everywhere plus rough uniformity over interior bins.
  Patch p = rapforge::testing::random_patch(16, 5);
  p.scale_min = p.scale_max = 64;
  p.origin = {192, 240};
  p.placement_radius = 500;
  const int h = 384, w = 480;
  const int row_hi = h - 64, col_hi = w - 64;
  const int bins = 8;
  std::vector<int> hist(bins * bins, 0);
  Rng rng(6);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const Placement pl = sample_placement(p, h, w, rng);
    REQUIRE(pl.location.row >= 0);
    REQUIRE(pl.location.row <= row_hi);
    REQUIRE(pl.location.col >= 0);
    REQUIRE(pl.location.col <= col_hi);
    const int by = std::min(bins - 1, pl.location.row * bins / (row_hi + 1));
    const int bx = std::min(bins - 1, pl.location.col * bins / (col_hi + 1));
    ++hist[by * bins + bx];
  }
  for (int i = 0; i < bins * bins; ++i) CHECK(hist[i] > 0);

  // Interior bins (no clamp mass) should be near-uniform.
  double chi2 = 0.0;
  int n_interior = 0;
  double interior_total = 0.0;
  for (int by = 1; by < bins - 1; ++by)
    for (int bx = 1; bx < bins - 1; ++bx) {
      interior_total += hist[by * bins + bx];
      ++n_interior;
    }
  const double expect = interior_total / n_interior;
  for (int by = 1; by < bins - 1; ++by)
    for (int bx = 1; bx < bins - 1; ++bx) {
      const double d = hist[by * bins + bx] - expect;
      chi2 += d * d / expect;
    }
  // 35 dof; 99.9th percentile is ~66.6.
  CHECK(chi2 < 90.0);
}

TEST_CASE("scale_min larger than the scene is a parameter error") {
  Patch p = rapforge::testing::random_patch(8, 7);
  p.scale_min = p.scale_max = 100;
  Rng rng(8);
  CHECK_THROWS_AS(sample_placement(p, 64, 64, rng), ParameterError);
}

TEST_CASE("quadrant mode stays in the bottom-right quadrant") {
  Patch p = rapforge::testing::random_patch(8, 9);
  p.scale_min = 8;
  p.scale_max = 16;
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    const Placement pl =
        sample_placement(p, 96, 128, rng, PlacementMode::QuadrantBottomRight);
    CHECK(pl.location.row >= 48);
    CHECK(pl.location.col >= 64);
    CHECK(pl.location.row + pl.scale <= 96);
    CHECK(pl.location.col + pl.scale <= 128);
  }
}

TEST_CASE("identity-scale paste reproduces patch values exactly") {
  const Scene s = rapforge::testing::random_scene(32, 32, 11);
  const Patch p = rapforge::testing::random_patch(8, 12);
  const Placement pl{{5, 9}, 8};
  const Scene out = apply(s, p, pl);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(out.pixels.at(5 + y, 9 + x, c) == p.values.at(y, x, c));
}

TEST_CASE("apply never touches pixels outside the footprint") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const Scene s = rapforge::testing::random_scene(24, 30, 100 + trial);
    Patch p = rapforge::testing::random_patch(6, 200 + trial);
    const int scale = static_cast<int>(rng.uniform_int(1, 12));
    const Placement pl{{static_cast<int>(rng.uniform_int(0, 24 - scale)),
                        static_cast<int>(rng.uniform_int(0, 30 - scale))},
                       scale};
    const Scene out = apply(s, p, pl);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 30; ++x) {
        const bool inside = y >= pl.location.row && y < pl.location.row + scale &&
                            x >= pl.location.col && x < pl.location.col + scale;
        if (!inside)
          for (int c = 0; c < 3; ++c)
            CHECK(out.pixels.at(y, x, c) == s.pixels.at(y, x, c));
      }
  }
}

TEST_CASE("bilinear center of a checkerboard 2x2 is one half") {
  // Oracle: corner-aligned bilinear at the 3x3 center samples (0.5, 0.5),
  // averaging 0,1,1,0 -> 0.5.
  Array3 src(2, 2, 1);
  src.at(0, 0, 0) = 0.0;
  src.at(0, 1, 0) = 1.0;
  src.at(1, 0, 0) = 1.0;
  src.at(1, 1, 0) = 0.0;
  const Array3 out = resize_bilinear(src, 3);
  CHECK(out.at(1, 1, 0) == doctest::Approx(0.5).epsilon(1e-12));
  // Corners are preserved under corner alignment.
  CHECK(out.at(0, 0, 0) == 0.0);
  CHECK(out.at(0, 2, 0) == 1.0);
  CHECK(out.at(2, 0, 0) == 1.0);
  CHECK(out.at(2, 2, 0) == 0.0);
}

TEST_CASE("out-of-bounds footprint is a placement error") {
  const Scene s = rapforge::testing::random_scene(16, 16, 14);
  const Patch p = rapforge::testing::random_patch(8, 15);
  CHECK_THROWS_AS(apply(s, p, Placement{{12, 0}, 8}), PlacementError);
  CHECK_THROWS_AS(apply(s, p, Placement{{0, -1}, 8}), PlacementError);
}

TEST_CASE("apply gradient matches finite differences through the resize") {
  const Scene s = rapforge::testing::random_scene(16, 16, 16);
  Patch p = rapforge::testing::random_patch(5, 17);
  const Placement pl{{3, 4}, 9}; // non-trivial bilinear resize

  // Scalar: weighted sum of the composited scene.
  Array3 w(16, 16, 3);
  Rng rng(18);
  for (double& v : w.v) v = rng.uniform(-1, 1);

  const Array3 dpatch = apply_backward(w, p, pl);
  for (size_t i = 0; i < p.values.v.size(); i += 3) {
    const double fd = rapforge::testing::central_diff(
        [&](double x) {
          Patch p2 = p;
          p2.values.v[i] = x;
          const Scene out = apply(s, p2, pl);
          double acc = 0;
          for (size_t j = 0; j < out.pixels.v.size(); ++j)
            acc += out.pixels.v[j] * w.v[j];
          return acc;
        },
        p.values.v[i]);
    CHECK(rel_err(dpatch.v[i], fd) < 1e-3);
  }
}

TEST_CASE("unclipped patches pass out-of-range values through") {
  const Scene s = rapforge::testing::random_scene(16, 16, 19);
  Patch p = rapforge::testing::random_patch(4, 20, ClipPolicy::Unclipped);
  p.values.at(0, 0, 0) = 2.5;
  p.values.at(1, 1, 1) = -0.75;
  const Placement pl{{2, 2}, 4};
  const Scene out = apply(s, p, pl);
  CHECK(out.pixels.at(2, 2, 0) == 2.5);
  CHECK(out.pixels.at(3, 3, 1) == -0.75);

  Patch clipped = p;
  clipped.clip_policy = ClipPolicy::Clip01;
  const Scene out2 = apply(s, clipped, pl);
  CHECK(out2.pixels.at(2, 2, 0) == 1.0);
  CHECK(out2.pixels.at(3, 3, 1) == 0.0);
}
