#include "rapforge/placement.hpp"

#include <algorithm>
#include <cmath>

namespace rapforge {

namespace {

int clampi(int x, int lo, int hi) { return x < lo ? lo : (x > hi ? hi : x); }

// Sample positions for one output index under corner-aligned mapping.
struct Taps {
  int i0, i1;
  double w1; // weight of i1; i0 gets (1 - w1)
};

Taps taps_for(int out_idx, int out_n, int src_n) {
  if (src_n == 1) return {0, 0, 0.0};
  double src;
  if (out_n == 1)
    src = (src_n - 1) / 2.0;
  else
    src = static_cast<double>(out_idx) * (src_n - 1) / (out_n - 1);
  int i0 = static_cast<int>(src);
  if (i0 > src_n - 2) i0 = src_n - 2;
  const double frac = src - i0;
  return {i0, i0 + 1, frac};
}

}  // namespace

Placement sample_placement(const Patch& patch, int scene_h, int scene_w, Rng& draw,
                           PlacementMode mode) {
  if (patch.scale_min > std::min(scene_h, scene_w))
    throw ParameterError("sample_placement: scale_min exceeds scene dims");
  if (patch.scale_min < 1 || patch.scale_max < patch.scale_min)
    throw ParameterError("sample_placement: bad scale range");

  Placement p;
  const int smax_fit = std::min(patch.scale_max, std::min(scene_h, scene_w));
  p.scale = static_cast<int>(draw.uniform_int(patch.scale_min, smax_fit));

  const int row_hi = scene_h - p.scale;
  const int col_hi = scene_w - p.scale;
  int row = patch.origin.row, col = patch.origin.col;
  switch (mode) {
    case PlacementMode::OriginRadius: {
      const int r = patch.placement_radius;
      row += static_cast<int>(draw.uniform_int(-r, r));
      col += static_cast<int>(draw.uniform_int(-r, r));
      break;
    }
    case PlacementMode::QuadrantBottomRight: {
      row = static_cast<int>(draw.uniform_int(scene_h / 2, std::max(scene_h / 2, row_hi)));
      col = static_cast<int>(draw.uniform_int(scene_w / 2, std::max(scene_w / 2, col_hi)));
      break;
    }
    case PlacementMode::Fixed:
      break;
  }
  p.location.row = clampi(row, 0, std::max(0, row_hi));
  p.location.col = clampi(col, 0, std::max(0, col_hi));
  return p;
}

Array3 resize_bilinear(const Array3& src, int out_side) {
  if (out_side < 1) throw ParameterError("resize_bilinear: side must be >= 1");
  if (out_side == src.h && out_side == src.w) return src;
  Array3 out(out_side, out_side, src.c);
  for (int y = 0; y < out_side; ++y) {
    const Taps ty = taps_for(y, out_side, src.h);
    for (int x = 0; x < out_side; ++x) {
      const Taps tx = taps_for(x, out_side, src.w);
      const double* p00 = src.row(ty.i0, tx.i0);
      const double* p01 = src.row(ty.i0, tx.i1);
      const double* p10 = src.row(ty.i1, tx.i0);
      const double* p11 = src.row(ty.i1, tx.i1);
      double* o = out.row(y, x);
      const double w00 = (1 - ty.w1) * (1 - tx.w1);
      const double w01 = (1 - ty.w1) * tx.w1;
      const double w10 = ty.w1 * (1 - tx.w1);
      const double w11 = ty.w1 * tx.w1;
      for (int c = 0; c < src.c; ++c)
        o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
    }
  }
  return out;
}

Array3 resize_bilinear_backward(const Array3& dout, int src_h, int src_w) {
  if (dout.h == src_h && dout.w == src_w) return dout;
  Array3 din(src_h, src_w, dout.c);
  for (int y = 0; y < dout.h; ++y) {
    const Taps ty = taps_for(y, dout.h, src_h);
    for (int x = 0; x < dout.w; ++x) {
      const Taps tx = taps_for(x, dout.w, src_w);
      const double* g = dout.row(y, x);
      double* p00 = din.row(ty.i0, tx.i0);
      double* p01 = din.row(ty.i0, tx.i1);
      double* p10 = din.row(ty.i1, tx.i0);
      double* p11 = din.row(ty.i1, tx.i1);
      const double w00 = (1 - ty.w1) * (1 - tx.w1);
      const double w01 = (1 - ty.w1) * tx.w1;
      const double w10 = ty.w1 * (1 - tx.w1);
      const double w11 = ty.w1 * tx.w1;
      for (int c = 0; c < dout.c; ++c) {
        p00[c] += w00 * g[c];
        p01[c] += w01 * g[c];
        p10[c] += w10 * g[c];
        p11[c] += w11 * g[c];
      }
    }
  }
  return din;
}

Scene apply(const Scene& s, const Patch& patch, const Placement& p) {
  const int h = s.pixels.h, w = s.pixels.w;
  if (p.scale < 1 || p.location.row < 0 || p.location.col < 0 ||
      p.location.row + p.scale > h || p.location.col + p.scale > w)
    throw PlacementError("apply: patch footprint out of bounds");
  if (s.pixels.c != patch.values.c)
    throw ShapeError("apply: channel count mismatch");

  Scene out = s;
  const Array3 resized = resize_bilinear(patch.values, p.scale);
  const bool clip = patch.clip_policy == ClipPolicy::Clip01;
  for (int y = 0; y < p.scale; ++y) {
    double* dst = out.pixels.row(p.location.row + y, p.location.col);
    const double* src = resized.row(y, 0);
    for (int i = 0; i < p.scale * patch.values.c; ++i)
      dst[i] = clip ? std::clamp(src[i], 0.0, 1.0) : src[i];
  }
  return out;
}

Array3 apply_backward(const Array3& dscene, const Patch& patch, const Placement& p) {
  Array3 dresized(p.scale, p.scale, patch.values.c);
  const bool clip = patch.clip_policy == ClipPolicy::Clip01;
  // The clamp is only active where the resized value left [0,1]; recompute
  // it to zero those taps exactly.
  const Array3 resized =
      clip ? resize_bilinear(patch.values, p.scale) : Array3();
  for (int y = 0; y < p.scale; ++y) {
    const double* g = dscene.row(p.location.row + y, p.location.col);
    double* d = dresized.row(y, 0);
    for (int i = 0; i < p.scale * patch.values.c; ++i) {
      if (clip) {
        const double v = resized.v[static_cast<size_t>(y) * p.scale * patch.values.c + i];
        d[i] = (v >= 0.0 && v <= 1.0) ? g[i] : 0.0;
      } else {
        d[i] = g[i];
      }
    }
  }
  return resize_bilinear_backward(dresized, patch.values.h, patch.values.w);
}

}  // namespace rapforge
