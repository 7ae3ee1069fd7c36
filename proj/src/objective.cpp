#include "rapforge/objective.hpp"

#include <algorithm>
#include <cmath>

namespace rapforge {

namespace {

constexpr double kProbFloor = 1e-7;
constexpr double kDiceEps = 1e-6;

bool in_shape(int dy, int dx, int radius, ShapeKind shape) {
  if (shape == ShapeKind::Square)
    return std::abs(dy) <= radius && std::abs(dx) <= radius;
  return dy * dy + dx * dx <= radius * radius;
}

void rebuild_support(RegionSpec& rs) {
  rs.support.clear();
  for (size_t i = 0; i < rs.mask.v.size(); ++i)
    if (rs.mask.v[i] != 0.0) rs.support.push_back(i);
}

double clampp(double x) { return std::clamp(x, kProbFloor, 1.0 - kProbFloor); }

// t*ln(t/y) + (1-t)*ln((1-t)/(1-y)) with 0*ln(0) = 0.
double bernoulli_kl(double t, double y) {
  double acc = 0.0;
  if (t > 0.0) acc += t * std::log(t / y);
  if (t < 1.0) acc += (1.0 - t) * std::log((1.0 - t) / (1.0 - y));
  return acc;
}

}  // namespace

RegionSpec build_region(int height, int width, int channels, Coord center,
                        int class_index, int radius, ShapeKind shape) {
  if (class_index < 0 || class_index >= channels)
    throw ParameterError("build_region: class index out of range");
  if (radius < 0) throw ParameterError("build_region: radius must be >= 0");
  if (center.row - radius < 0 || center.row + radius >= height ||
      center.col - radius < 0 || center.col + radius >= width)
    throw ParameterError("build_region: footprint exceeds dims");

  RegionSpec rs;
  rs.center = center;
  rs.class_index = class_index;
  rs.radius = radius;
  rs.shape = shape;
  rs.mask = Array3(height, width, channels);
  for (int y = center.row - radius; y <= center.row + radius; ++y)
    for (int x = center.col - radius; x <= center.col + radius; ++x)
      if (in_shape(y - center.row, x - center.col, radius, shape)) {
        rs.mask.at(y, x, class_index) = 1.0;
        rs.score_footprint.push_back({y, x});
      }
  rs.target = rs.mask;
  rebuild_support(rs);
  return rs;
}

RegionSpec build_custom_target(int height, int width, int channels, int class_index,
                               const Array2i& stencil, Coord anchor,
                               int operation_radius) {
  if (class_index < 0 || class_index >= channels)
    throw ParameterError("build_custom_target: class index out of range");
  if (stencil.h < 1 || stencil.w < 1)
    throw ParameterError("build_custom_target: empty stencil");
  if (anchor.row < 0 || anchor.col < 0 || anchor.row + stencil.h > height ||
      anchor.col + stencil.w > width)
    throw ParameterError("build_custom_target: stencil out of bounds");
  if (operation_radius < 0)
    throw ParameterError("build_custom_target: negative operation radius");

  RegionSpec rs;
  rs.custom_target = true;
  rs.class_index = class_index;
  rs.shape = ShapeKind::Square;
  rs.center = {anchor.row + stencil.h / 2, anchor.col + stencil.w / 2};
  rs.radius = std::max(stencil.h, stencil.w) / 2;
  rs.mask = Array3(height, width, channels);
  rs.target = Array3(height, width, channels);

  const int top = std::max(0, anchor.row - operation_radius);
  const int bottom = std::min(height - 1, anchor.row + stencil.h - 1 + operation_radius);
  const int left = std::max(0, anchor.col - operation_radius);
  const int right = std::min(width - 1, anchor.col + stencil.w - 1 + operation_radius);
  for (int y = top; y <= bottom; ++y)
    for (int x = left; x <= right; ++x) rs.mask.at(y, x, class_index) = 1.0;

  for (int y = 0; y < stencil.h; ++y)
    for (int x = 0; x < stencil.w; ++x)
      if (stencil.at(y, x) != 0)
        rs.target.at(anchor.row + y, anchor.col + x, class_index) = 1.0;

  // Score on the stencil rectangle.
  for (int y = anchor.row; y < anchor.row + stencil.h; ++y)
    for (int x = anchor.col; x < anchor.col + stencil.w; ++x)
      rs.score_footprint.push_back({y, x});
  rebuild_support(rs);
  return rs;
}

RegionSpec inflate_target(const RegionSpec& rs, double factor) {
  if (factor < 1.0) throw ParameterError("inflate_target: factor must be >= 1");
  if (factor == 1.0) return rs;
  if (rs.custom_target)
    throw ParameterError("inflate_target: custom-stencil regions cannot be inflated");

  const int new_radius = static_cast<int>(std::lround(rs.radius * factor));
  RegionSpec out = build_region(rs.height(), rs.width(), rs.channels(), rs.center,
                                rs.class_index, new_radius, rs.shape);
  // Scoring stays on the original footprint.
  out.score_footprint = rs.score_footprint;
  return out;
}

Array3 masked_output(const Array3& y, const Array3& mask) {
  if (!y.same_shape(mask)) throw ShapeError("masked_output: shape mismatch");
  Array3 out(y.h, y.w, y.c);
  for (size_t i = 0; i < y.v.size(); ++i) out.v[i] = y.v[i] * mask.v[i];
  return out;
}

double attack_loss(const Array3& y_masked, const RegionSpec& region, LossKind kind,
                   Array3* dy, bool kl_swap) {
  if (!y_masked.same_shape(region.mask))
    throw ShapeError("attack_loss: map does not match region dims");
  if (region.support.empty())
    throw DegenerateObjectiveError("attack_loss: empty mask support");

  const auto& support = region.support;
  const double n = static_cast<double>(support.size());
  if (dy) *dy = Array3(y_masked.h, y_masked.w, y_masked.c);

  auto add_l1 = [&](double& loss) {
    for (size_t i : support) {
      const double d = y_masked.v[i] - region.target.v[i];
      loss += std::abs(d) / n;
      if (dy) dy->v[i] += (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
    }
  };
  auto add_kl = [&](double& loss) {
    for (size_t i : support) {
      const double t = region.target.v[i];
      const double yc = clampp(y_masked.v[i]);
      const bool interior =
          y_masked.v[i] > kProbFloor && y_masked.v[i] < 1.0 - kProbFloor;
      if (!kl_swap) {
        loss += bernoulli_kl(t, yc) / n;
        if (dy && interior) dy->v[i] += (-t / yc + (1.0 - t) / (1.0 - yc)) / n;
      } else {
        const double tc = clampp(t);
        loss += bernoulli_kl(yc, tc) / n;
        if (dy && interior)
          dy->v[i] += (std::log(yc / tc) - std::log((1.0 - yc) / (1.0 - tc))) / n;
      }
    }
  };

  double loss = 0.0;
  switch (kind) {
    case LossKind::L1:
      add_l1(loss);
      break;
    case LossKind::L2:
      for (size_t i : support) {
        const double d = y_masked.v[i] - region.target.v[i];
        loss += d * d / n;
        if (dy) dy->v[i] += 2.0 * d / n;
      }
      break;
    case LossKind::Kl:
      add_kl(loss);
      break;
    case LossKind::Bce:
      for (size_t i : support) {
        const double t = region.target.v[i];
        const double yc = clampp(y_masked.v[i]);
        loss += -(t * std::log(yc) + (1.0 - t) * std::log(1.0 - yc)) / n;
        if (dy && y_masked.v[i] > kProbFloor && y_masked.v[i] < 1.0 - kProbFloor)
          dy->v[i] += (-t / yc + (1.0 - t) / (1.0 - yc)) / n;
      }
      break;
    case LossKind::Dice: {
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      for (size_t i : support) {
        const double t = region.target.v[i];
        const double y = y_masked.v[i];
        sxy += y * t;
        sxx += y * y;
        syy += t * t;
      }
      const double num = 2.0 * sxy + kDiceEps;
      const double den = sxx + syy + kDiceEps;
      loss = 1.0 - num / den;
      if (dy)
        for (size_t i : support)
          dy->v[i] += (2.0 * num * y_masked.v[i] - 2.0 * den * region.target.v[i]) /
                      (den * den);
      break;
    }
    case LossKind::KlPlusL1:
      add_kl(loss);
      add_l1(loss);
      break;
  }
  return loss;
}

}  // namespace rapforge
