#pragma once

#include "rapforge/domain.hpp"

namespace rapforge {

// Region of operation: mask is 1 on the shape footprint along channel
// class_index, and the target is initialized to the mask (insert the class).
RegionSpec build_region(int height, int width, int channels, Coord center,
                        int class_index, int radius, ShapeKind shape);

// Custom-shape objective: the target is the stencil (nonzero = 1) placed on
// channel class_index at `anchor`; the mask covers the stencil's rectangle
// dilated by operation_radius. An all-zeros stencil yields an erasure
// objective.
RegionSpec build_custom_target(int height, int width, int channels, int class_index,
                               const Array2i& stencil, Coord anchor,
                               int operation_radius = 0);

// Scales the target footprint radius by `factor` about the center; the
// original footprint is kept for scoring.
RegionSpec inflate_target(const RegionSpec& rs, double factor);

// Elementwise product y (*) m.
Array3 masked_output(const Array3& y, const Array3& mask);

// Masked attack loss over the region's support. Nonnegative; exactly zero
// outside mask support (gradients included). KL is per-pixel Bernoulli
// KL(t || y) with probability floor 1e-7, averaged over the support;
// kl_swap reverses the direction to KL(y || t).
double attack_loss(const Array3& y_masked, const RegionSpec& region, LossKind kind,
                   Array3* dy = nullptr, bool kl_swap = false);

}  // namespace rapforge
