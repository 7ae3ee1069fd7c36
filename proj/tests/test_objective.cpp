#include <doctest.h>

#include <cmath>

#include "rapforge/objective.hpp"
#include "test_support.hpp"

using namespace rapforge;
using rapforge::testing::rel_err;

TEST_CASE("square region mask counts match brute-force enumeration") {
  // Locked-row geometry: r=20 square at (250,250) on 384x480.
  const RegionSpec rs =
      build_region(384, 480, 4, {250, 250}, 2, 20, ShapeKind::Square);
  // Oracle: enumerate the footprint directly.
  long count = 0;
  for (int y = 0; y < 384; ++y)
    for (int x = 0; x < 480; ++x)
      if (std::abs(y - 250) <= 20 && std::abs(x - 250) <= 20) ++count;
  CHECK(count == 41 * 41);
  CHECK(static_cast<long>(rs.support.size()) == 1681);

  // All mass sits on channel 2.
  for (size_t i : rs.support) CHECK(i % 4 == 2);
  // Target initialized to the mask.
  CHECK(rs.target.v == rs.mask.v);
}

TEST_CASE("radius zero gives a single-pixel mask") {
  const RegionSpec rs = build_region(32, 32, 3, {10, 12}, 1, 0, ShapeKind::Circle);
  CHECK(rs.support.size() == 1);
  CHECK(rs.mask.at(10, 12, 1) == 1.0);
}

TEST_CASE("integer disk of radius one holds five pixels") {
  // Oracle: enumerate dy^2 + dx^2 <= 1.
  int count = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      if (dy * dy + dx * dx <= 1) ++count;
  CHECK(count == 5);
  const RegionSpec rs = build_region(16, 16, 2, {8, 8}, 0, 1, ShapeKind::Circle);
  CHECK(rs.support.size() == 5);
}

TEST_CASE("footprint exceeding dims is a parameter error") {
  CHECK_THROWS_AS(build_region(32, 32, 3, {2, 16}, 0, 5, ShapeKind::Square),
                  ParameterError);
  CHECK_THROWS_AS(build_region(32, 32, 3, {16, 30}, 0, 5, ShapeKind::Circle),
                  ParameterError);
}

TEST_CASE("custom target: degenerate stencil equals build_region r=0") {
  Array2i stencil(1, 1, 1);
  const RegionSpec custom = build_custom_target(24, 24, 3, 1, stencil, {7, 9});
  const RegionSpec shaped = build_region(24, 24, 3, {7, 9}, 1, 0, ShapeKind::Square);
  CHECK(custom.mask.v == shaped.mask.v);
  CHECK(custom.target.v == shaped.target.v);
  CHECK(custom.support == shaped.support);
}

TEST_CASE("custom target: all-zero stencil is an erasure objective") {
  Array2i stencil(4, 5, 0);
  const RegionSpec rs = build_custom_target(24, 24, 3, 2, stencil, {3, 3});
  CHECK(rs.support.size() == 20); // mask covers the rectangle
  for (size_t i : rs.support) CHECK(rs.target.v[i] == 0.0);
}

TEST_CASE("custom target: checkerboard mask strictly contains target support") {
  Array2i stencil(4, 4, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) stencil.at(y, x) = (y + x) % 2;
  const RegionSpec rs = build_custom_target(24, 24, 3, 0, stencil, {5, 5});
  size_t target_support = 0;
  for (size_t i : rs.support)
    if (rs.target.v[i] != 0.0) ++target_support;
  CHECK(target_support == 8);
  CHECK(rs.support.size() == 16);
  CHECK(rs.support.size() > target_support);
}

TEST_CASE("custom target out of bounds is a parameter error") {
  Array2i stencil(4, 4, 1);
  CHECK_THROWS_AS(build_custom_target(24, 24, 3, 0, stencil, {22, 0}),
                  ParameterError);
}

TEST_CASE("inflate_target scales the mask but scores the original footprint") {
  const RegionSpec rs = build_region(384, 480, 4, {250, 250}, 2, 20, ShapeKind::Square);
  const RegionSpec same = inflate_target(rs, 1.0);
  CHECK(same.mask.v == rs.mask.v);

  const RegionSpec big = inflate_target(rs, 3.0);
  CHECK(big.radius == 60);
  CHECK(big.support.size() == 121u * 121u);
  CHECK(big.score_footprint.size() == rs.score_footprint.size());

  CHECK_THROWS_AS(inflate_target(rs, 7.0), ParameterError); // pushes past border
  CHECK_THROWS_AS(inflate_target(rs, 0.5), ParameterError);
}

TEST_CASE("masked_output identities") {
  Array3 y(4, 4, 2);
  Rng rng(5);
  for (double& v : y.v) v = rng.uniform();
  Array3 ones(4, 4, 2, 1.0), zeros(4, 4, 2, 0.0);
  CHECK(masked_output(y, ones).v == y.v);
  for (double v : masked_output(y, zeros).v) CHECK(v == 0.0);
  Array3 bad(4, 5, 2);
  CHECK_THROWS_AS(masked_output(y, bad), ShapeError);
}

TEST_CASE("loss oracles: hand-computed values") {
  // One-pixel region, t = 1, y = 0.5.
  const RegionSpec rs = build_region(8, 8, 2, {4, 4}, 1, 0, ShapeKind::Square);
  Array3 y(8, 8, 2, 0.0);
  y.at(4, 4, 1) = 0.5;

  // L1 = |0.5 - 1| = 0.5; Bernoulli KL(1 || 0.5) = ln 2.
  CHECK(attack_loss(y, rs, LossKind::L1) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(attack_loss(y, rs, LossKind::Kl) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(attack_loss(y, rs, LossKind::KlPlusL1) ==
        doctest::Approx(std::log(2.0) + 0.5).epsilon(1e-9));
  CHECK(attack_loss(y, rs, LossKind::L2) == doctest::Approx(0.25).epsilon(1e-9));

  // Exact match: l1 vanishes exactly; kl vanishes up to the probability
  // floor applied to y.
  Array3 exact(8, 8, 2, 0.0);
  exact.at(4, 4, 1) = 1.0;
  CHECK(attack_loss(exact, rs, LossKind::Kl) < 1e-6);
  CHECK(attack_loss(exact, rs, LossKind::L1) == 0.0);
}

TEST_CASE("dice attack loss hits both ends of its range") {
  const RegionSpec rs = build_region(8, 8, 1, {4, 4}, 0, 2, ShapeKind::Square);
  Array3 identical = rs.target;
  CHECK(attack_loss(identical, rs, LossKind::Dice) ==
        doctest::Approx(0.0).epsilon(1e-6));
  Array3 disjoint(8, 8, 1, 0.0); // zero overlap on support
  CHECK(attack_loss(disjoint, rs, LossKind::Dice) ==
        doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("loss locality: values outside support never matter") {
  const RegionSpec rs = build_region(12, 12, 3, {6, 6}, 1, 2, ShapeKind::Circle);
  Rng rng(77);
  Array3 y(12, 12, 3);
  for (double& v : y.v) v = rng.uniform();

  for (const LossKind kind : {LossKind::Kl, LossKind::L1, LossKind::L2,
                              LossKind::Bce, LossKind::Dice, LossKind::KlPlusL1}) {
    const double base = attack_loss(y, rs, kind);
    Array3 y2 = y;
    // Randomize everything outside the support.
    std::vector<bool> on(y.v.size(), false);
    for (size_t i : rs.support) on[i] = true;
    for (size_t i = 0; i < y2.v.size(); ++i)
      if (!on[i]) y2.v[i] = rng.uniform(-5.0, 5.0);
    CHECK(attack_loss(y2, rs, kind) == base); // exact, not approximate
  }
}

TEST_CASE("loss gradients match finite differences and vanish off support") {
  const RegionSpec rs = build_region(10, 10, 2, {5, 5}, 0, 1, ShapeKind::Square);
  Rng rng(31);
  Array3 y(10, 10, 2);
  for (double& v : y.v) v = rng.uniform(0.05, 0.95);

  for (const LossKind kind : {LossKind::Kl, LossKind::L1, LossKind::L2,
                              LossKind::Bce, LossKind::Dice, LossKind::KlPlusL1}) {
    Array3 dy;
    attack_loss(y, rs, kind, &dy);
    std::vector<bool> on(y.v.size(), false);
    for (size_t i : rs.support) on[i] = true;
    for (size_t i = 0; i < y.v.size(); ++i) {
      if (!on[i]) {
        CHECK(dy.v[i] == 0.0);
        continue;
      }
      if (kind == LossKind::L1 || kind == LossKind::KlPlusL1) continue; // kinked
      const double fd = rapforge::testing::central_diff(
          [&](double x) {
            Array3 y2 = y;
            y2.v[i] = x;
            return attack_loss(y2, rs, kind);
          },
          y.v[i]);
      CHECK(rel_err(dy.v[i], fd) < 1e-5);
    }
  }
}

TEST_CASE("kl direction swap is differentiable and distinct") {
  const RegionSpec rs = build_region(6, 6, 1, {3, 3}, 0, 1, ShapeKind::Square);
  Array3 y(6, 6, 1, 0.0);
  for (size_t i : rs.support) y.v[i] = 0.3;
  const double fwd = attack_loss(y, rs, LossKind::Kl, nullptr, false);
  const double swp = attack_loss(y, rs, LossKind::Kl, nullptr, true);
  CHECK(fwd != doctest::Approx(swp));
  Array3 dy;
  attack_loss(y, rs, LossKind::Kl, &dy, true);
  for (size_t i : rs.support) {
    const double fd = rapforge::testing::central_diff(
        [&](double x) {
          Array3 y2 = y;
          y2.v[i] = x;
          return attack_loss(y2, rs, LossKind::Kl, nullptr, true);
        },
        y.v[i]);
    CHECK(rel_err(dy.v[i], fd) < 1e-5);
  }
}

TEST_CASE("empty support is a degenerate objective error") {
  RegionSpec rs = build_region(8, 8, 1, {4, 4}, 0, 1, ShapeKind::Square);
  rs.support.clear();
  Array3 y(8, 8, 1, 0.5);
  CHECK_THROWS_AS(attack_loss(y, rs, LossKind::Kl), DegenerateObjectiveError);
}
