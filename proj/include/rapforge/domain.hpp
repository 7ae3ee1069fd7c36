#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rapforge/tensor.hpp"

namespace rapforge {

// Pixel coordinate as (row, col).
struct Coord {
  int row = 0;
  int col = 0;
  bool operator==(const Coord& o) const { return row == o.row && col == o.col; }
};

enum class ClipPolicy { Clip01, Unclipped };
enum class ShapeKind { Circle, Square };
enum class LossKind { Kl, L1, L2, Bce, Dice, KlPlusL1 };

std::string to_string(ClipPolicy p);
std::string to_string(ShapeKind s);
std::string to_string(LossKind k);
ClipPolicy clip_policy_from_string(const std::string& s);
ShapeKind shape_kind_from_string(const std::string& s);
LossKind loss_kind_from_string(const std::string& s);

// An H x W x C image in [0,1] with optional per-pixel class labels.
// Values are immutable by convention once a Scene enters a dataset; the
// compositing path copies before writing.
struct Scene {
  Array3 pixels;                 // values in [0,1] for valid scenes
  std::optional<Array2i> labels; // entries in [0, K) when present
  std::string id;
};

// Per-pixel class confidences. Channels are independent sigmoid-style
// confidences, not a softmax simplex, so rows need not sum to one.
struct ProbMap {
  Array3 probs; // H x W x K, entries in [0,1]
};

// Region of operation: binary mask m, target pattern t, and the footprint
// used for scoring. After inflate_target the scoring footprint keeps the
// original geometry while mask/target cover the inflated one.
struct RegionSpec {
  Coord center;
  int class_index = 0;
  int radius = 0;
  ShapeKind shape = ShapeKind::Square;
  Array3 mask;   // H x W x K binary
  Array3 target; // H x W x K in [0,1]

  // Scoring footprint: the pre-inflation pixels attack_success evaluates on
  // channel class_index.
  std::vector<Coord> score_footprint;

  // True when the target came from a custom stencil rather than a shape.
  bool custom_target = false;

  // Flat indices into mask.v where mask == 1, cached for the loss kernels.
  std::vector<size_t> support;

  int height() const { return mask.h; }
  int width() const { return mask.w; }
  int channels() const { return mask.c; }
};

// The trainable adversarial artifact. Values are kept on the float32 grid
// (snapped after every optimizer update) so the on-disk bundle round-trips
// bitwise.
struct Patch {
  Array3 values; // P x P x C
  Coord origin;  // top-left placement anchor in scene coordinates
  int scale_min = 0;
  int scale_max = 0; // side lengths in pixels, inclusive range
  int placement_radius = 0;
  ClipPolicy clip_policy = ClipPolicy::Clip01;

  // Metadata carried into the bundle sidecar.
  int class_index = 0;
  LossKind loss_kind = LossKind::Kl;
  uint64_t seed = 0;

  int side() const { return values.h; }
};

// How EoT placements are drawn during forging and evaluation.
enum class PlacementMode { OriginRadius, QuadrantBottomRight, Fixed };
std::string to_string(PlacementMode m);
PlacementMode placement_mode_from_string(const std::string& s);

// Configuration of one forge run. Rates are fractions in (0,1]; time limits
// are seconds of wall clock. max_steps > 0 switches the run to deterministic
// stepping (no wall-clock reads influence the output).
struct ForgeConfig {
  LossKind loss_kind = LossKind::Kl;
  double learning_rate = 2.5; // single-image regime default
  int batch_size = 8;
  double success_threshold = 0.8;
  double curriculum_trigger_asr = 0.25;
  int curriculum_step_px = 1;
  double epoch_time_limit_s = 60.0;
  double lr_ramp_fraction = 0.1;
  uint64_t seed = 0;

  // Termination.
  double total_budget_s = 180.0; // wall-clock cap; <= 0 means uncapped
  long max_steps = 0;            // > 0 enables deterministic stepping

  // Curriculum extent and pacing.
  int max_radius = 0;       // cap for placement_radius
  int min_epoch_steps = 8;  // spacing between curriculum advances
  int lr_ramp_steps = 50;
  int pool_step = 1;        // images added per advance (incremental mode)
  bool grow_pool = true;    // incremental mode grows the image pool
  bool grow_scale = false;  // optional scale-range curriculum
  int scale_step = 0;

  // Patch geometry.
  int patch_size = 32;
  Coord patch_origin{56, 84};
  int scale_min = 32;
  int scale_max = 32;
  ClipPolicy clip_policy = ClipPolicy::Clip01;
  PlacementMode placement_mode = PlacementMode::OriginRadius;

  // Convergence rule (relative improvement of windowed mean loss).
  int convergence_window = 50;
  double convergence_tol = 1e-4;

  // Direction of the KL objective; false = KL(t || y).
  bool kl_swap_direction = false;

  void validate() const;
};

// One evaluated (scene, placement) case.
struct CaseResult {
  std::string scene_id;
  Coord placement;
  int scale = 0;
  bool success = false;
  double mean_confidence = 0.0;
};

// Keyed sweep table row.
struct SweepRow {
  std::string parameter;
  std::string value;
  int n_scenes = 0;
  int n_draws = 0;
  double asr = 0.0;
  double mean_conf = 0.0;
  double conf_rel_increase = 0.0;
  bool skipped = false;
};

// The evaluation product: per-case records, aggregates, sweep tables, and
// optional transfer matrices.
struct AttackReport {
  std::vector<CaseResult> per_scene;
  double success_rate = 0.0;
  double mean_confidence = 0.0;
  double conf_rel_increase = 0.0;
  int n_scenes = 0;
  int n_draws = 0;
  int n_omitted = 0;
  std::vector<SweepRow> sweep_table;
  std::vector<std::vector<double>> transfer_matrix;
  std::vector<std::vector<double>> transfer_rel_increase;
  std::vector<std::string> victim_names;
  // When nonzero, sweep_table holds heatmap_rows x heatmap_cols cells in
  // row-major order (the target-location grid).
  int heatmap_rows = 0, heatmap_cols = 0;
  std::string config_echo; // JSON text echoed into report files
  uint64_t seed = 0;
};

// Returns s unchanged when its invariants hold; throws RangeError /
// ShapeError otherwise.
const Scene& validate_scene(const Scene& s);

// Recomputes success_rate from flags; throws if confidences leave [0,1].
void validate_report(const AttackReport& r);

// Snap a double to the nearest float32 value. Patch values live on this
// grid so the binary bundle is lossless.
inline double snap_f32(double x) { return static_cast<double>(static_cast<float>(x)); }
void snap_f32(Array3& a);

// Patch bundle I/O: <stem>.patch.bin (raw float32 LE, row-major
// row/col/channel) + <stem>.patch.json sidecar.
void save_patch(const Patch& p, const std::string& stem);
Patch load_patch(const std::string& stem);

}  // namespace rapforge
