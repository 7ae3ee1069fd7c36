#pragma once

#include <functional>

#include "rapforge/objective.hpp"
#include "rapforge/placement.hpp"
#include "rapforge/victim.hpp"

namespace rapforge {

struct SuccessResult {
  bool success = false;
  double mean_confidence = 0.0;
};

// Success iff at least `threshold` of the region's scoring footprint has
// confidence > 0.5 on the target channel. Also reports the mean confidence
// over that footprint.
SuccessResult attack_success(const ProbMap& y, const RegionSpec& region,
                             double threshold);

struct EvalOptions {
  int n_draws = 20;
  PlacementMode mode = PlacementMode::OriginRadius;
  uint64_t seed = 0;
  double success_threshold = 0.8;
};

// Scores the patch over EoT draws on every scene whose clean prediction
// does not already satisfy the objective (those scenes are omitted).
AttackReport evaluate_patch(const Patch& patch, VictimModel& victim,
                            const DatasetSplit& data, const RegionSpec& region,
                            const EvalOptions& opt);

// ---------------------------------------------------------------------------
// Parameter sweeps: one forge+evaluate per grid point, everything else
// locked to the setup.
// ---------------------------------------------------------------------------

enum class SweepParameter { PatchSize, PatchLocation, TargetSize, TargetLocation };
std::string to_string(SweepParameter p);
SweepParameter sweep_parameter_from_string(const std::string& s);

struct SweepSetup {
  ForgeConfig cfg;          // locked forge configuration
  Coord target_center{250, 250};
  int target_radius = 20;
  ShapeKind target_shape = ShapeKind::Square;
  int class_index = 2;
  EvalOptions eval;
};

// Forging procedure injected by the caller; returns the trained patch.
using ForgeFn = std::function<Patch(const ForgeConfig&, const RegionSpec&)>;

// Exactly one of int_grid / coord_grid is consulted, depending on the
// parameter kind (sizes vs locations). Infeasible points are recorded as
// skipped rows. `grid_rows`/`grid_cols` annotate 2-D location grids for
// heatmap rendering.
AttackReport sweep(const ForgeFn& forge_fn, SweepParameter param,
                   const std::vector<int>& int_grid,
                   const std::vector<Coord>& coord_grid, VictimModel& victim,
                   const DatasetSplit& eval_data, const SweepSetup& setup,
                   int grid_rows = 0, int grid_cols = 0);

// Grid helpers mirroring the sweep protocol: a diagonal from the image
// center to the bottom-right, and a cols x rows lattice over the image.
std::vector<Coord> diagonal_locations(int h, int w, int n, int footprint);
std::vector<Coord> lattice_locations(int h, int w, int cols, int rows);

// ---------------------------------------------------------------------------
// Cross-model transfer: entry (i, j) holds the ASR of the patch forged on
// victim i when applied to victim j, plus a relative-confidence-increase
// variant.
// ---------------------------------------------------------------------------

AttackReport transfer_matrix(const std::vector<Patch>& patches,
                             const std::vector<VictimModel*>& victims,
                             const std::vector<std::string>& victim_names,
                             const DatasetSplit& data, const RegionSpec& region,
                             const EvalOptions& opt);

// Writes <base>.csv and <base>.json under out_dir; adds <base>.png
// (heatmap or curve) when plotting is enabled and the table is plottable.
void render_reports(const AttackReport& report, const std::string& out_dir,
                    const std::string& base_name, bool plotting);

}  // namespace rapforge
