#pragma once

#include "rapforge/evaluation.hpp"
#include "rapforge/victim.hpp"

namespace rapforge {

// One training-log record; serialized as JSON-lines.
struct LogRecord {
  long step = 0;
  double loss = 0.0;
  double asr = 0.0;
  int radius = 0;
  double lr = 0.0;
  int pool = 0;
  double elapsed_s = 0.0;
};

// Curriculum bookkeeping. Radius and pool size never decrease within one
// run; asr_recent is the success rate over the last full batch.
struct CurriculumState {
  int current_radius = 0;
  int images_in_pool = 1;
  int pool_max = 1;
  int scale_hi = 0; // current upper scale bound (scale curriculum)
  long step = 0;
  long epoch_start_step = 0;
  double epoch_start_time = 0.0;
  double now = 0.0;
  double lr_base = 0.0;
  double lr_current = 0.0;
  double asr_recent = 0.0;
  long last_trigger_step = -1;
};

// Advances the curriculum when the epoch converged/timed out or the recent
// success rate reached the trigger: radius grows by curriculum_step_px
// (capped), the pool grows in incremental runs, and the learning rate drops
// to lr_ramp_fraction of base before ramping back. No trigger, no change.
CurriculumState curriculum_step(const CurriculumState& state, const ForgeConfig& cfg,
                                bool converged_or_timeout);

// True when the relative improvement of the windowed mean loss fell below
// tolerance (the last window against the one before it).
bool detect_convergence(const std::vector<double>& losses, int window,
                        double tolerance);

// Learning rate at `step` given the last curriculum trigger: the ramp rises
// linearly from lr_ramp_fraction * base back to base over lr_ramp_steps.
double ramped_lr(const ForgeConfig& cfg, long step, long last_trigger_step);

// Smallest placement radius whose clamped offsets reach every valid
// top-left cell for the smallest scale.
int covering_radius(Coord origin, int scene_h, int scene_w, int scale_min);

struct ForgeResult {
  Patch patch;
  std::vector<LogRecord> log;
  CurriculumState state;
  bool converged = false;
};

// The patch-synthesis loop: sample a batch and per-image placements, apply,
// forward, mask, loss, gradient step on the patch only. Incremental runs
// start from one image and radius zero and grow both on curriculum
// triggers. Terminates on the wall-clock budget, on max_steps
// (deterministic stepping; wall-clock never influences the run), or on
// convergence over the full pool at full radius.
ForgeResult forge_patch(VictimModel& victim, const DatasetSplit& data,
                        const RegionSpec& region, const ForgeConfig& cfg,
                        bool incremental);

void write_log_jsonl(const std::vector<LogRecord>& log, const std::string& path);
std::vector<LogRecord> read_log_jsonl(const std::string& path);

}  // namespace rapforge
