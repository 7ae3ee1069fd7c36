#pragma once

#include "rapforge/domain.hpp"

namespace rapforge {

// A concrete draw from the EoT distribution: top-left corner and side
// length of the pasted patch.
struct Placement {
  Coord location;
  int scale = 0;
};

// Draws scale uniformly over the patch's scale range and the location from
// the configured distribution, clamped so the footprint stays in bounds.
//  - OriginRadius: origin + uniform offset in the Chebyshev ball of the
//    patch's current placement_radius.
//  - QuadrantBottomRight: uniform over the bottom-right quadrant.
//  - Fixed: the origin itself (clamped).
Placement sample_placement(const Patch& patch, int scene_h, int scene_w, Rng& draw,
                           PlacementMode mode = PlacementMode::OriginRadius);

// Corner-aligned bilinear resize of a square patch to side `out_side`.
// out_side == src side returns a bitwise copy.
Array3 resize_bilinear(const Array3& src, int out_side);

// Transpose of resize_bilinear: scatters output-gradients back onto the
// source grid.
Array3 resize_bilinear_backward(const Array3& dout, int src_h, int src_w);

// Pastes the patch opaquely at the placement. Pixels outside the footprint
// are bitwise-identical to the input; composited values are clamped to
// [0,1] only under clip01.
Scene apply(const Scene& s, const Patch& patch, const Placement& p);

// Gradient of a scalar w.r.t. patch values, given its gradient w.r.t. the
// composited scene. Exactly zero where the clip01 clamp was active.
Array3 apply_backward(const Array3& dscene, const Patch& patch, const Placement& p);

}  // namespace rapforge
