#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "rapforge/domain.hpp"

namespace rapforge {

struct ClassDef {
  std::string name;
  int index = 0;
  std::array<uint8_t, 3> color{0, 0, 0};
};

struct DatasetSplit {
  std::vector<Scene> scenes;
  std::string split_name; // train | test | val
  std::vector<ClassDef> classes;

  int k() const { return static_cast<int>(classes.size()); }
  int height() const { return scenes.empty() ? 0 : scenes.front().pixels.h; }
  int width() const { return scenes.empty() ? 0 : scenes.front().pixels.w; }
};

// ---------------------------------------------------------------------------
// Augmentation. Geometric ops transform labels with the same coordinate map
// (nearest-neighbor); photometric ops leave labels untouched.
// ---------------------------------------------------------------------------

struct AugmentationSpec {
  bool flip = true;
  bool shift = true;
  bool crop = true;
  bool blur = true;
  bool sharpen = true;
  bool perspective = true;
  bool brightness = true;
  bool gamma = true;

  double max_shift_frac = 0.10;       // of each dimension
  double min_crop_frac = 0.80;        // retained area fraction per axis
  double max_brightness_delta = 0.20;
  double gamma_lo = 0.7, gamma_hi = 1.4;
  double max_perspective_frac = 0.05; // corner displacement, of each dimension

  uint64_t seed = 0;

  void validate() const;
};

// Concrete draws for one augmentation application. Exposed so tests can
// replay the same plan against pixels and labels independently.
struct AugmentationPlan {
  bool do_flip = false;
  int shift_dy = 0, shift_dx = 0;
  bool do_crop = false;
  int crop_top = 0, crop_left = 0, crop_h = 0, crop_w = 0;
  bool do_blur = false;
  bool do_sharpen = false;
  bool do_perspective = false;
  // Corner offsets (row, col) for TL, TR, BL, BR.
  double persp[4][2] = {{0, 0}, {0, 0}, {0, 0}, {0, 0}};
  double brightness_delta = 0.0;
  double gamma = 1.0;
};

AugmentationPlan draw_augmentation_plan(const AugmentationSpec& spec, int h, int w,
                                        Rng& rng);
Scene augment_with_plan(const Scene& s, const AugmentationPlan& plan);
Scene augment(const Scene& s, const AugmentationSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------
// Contextual corpus: scenes where a striped cue band near the top co-occurs
// with a blob disk near the center. Disks look identical for the blob and
// decoy classes, so the class decision at the disk requires the remote cue.
// Blob contrast varies down to near-invisible, which trains the long-range
// pathway the attack leverages.
// ---------------------------------------------------------------------------

struct ContextRule {
  double p_cue = 0.5;             // base rate of the cue band
  double p_blob_given_cue = 0.9;  // co-occurrence probability
  double p_blob_given_nocue = 0.05;
  double p_decoy_given_nocue = 0.85;
};

// Class indices in the generated corpus.
inline constexpr int kClassBackground = 0;
inline constexpr int kClassBand = 1;
inline constexpr int kClassBlob = 2;
inline constexpr int kClassDecoy = 3;

std::vector<ClassDef> contextual_class_defs();

DatasetSplit generate_contextual_corpus(int n, int height, int width,
                                        const ContextRule& rule, uint64_t seed,
                                        const std::string& split_name = "train");

// ---------------------------------------------------------------------------
// Disk layout: root/{images,labels}/<stem>.png plus root/classes.json.
// ---------------------------------------------------------------------------

DatasetSplit load_dataset(const std::string& root, const std::string& split_name);
void save_dataset(const DatasetSplit& split, const std::string& root,
                  bool force = false);

// Whole-image label for the encoder-classifier phase: the most frequent
// non-background class, or background when no foreground exists.
int derive_image_label(const Scene& s, int k);

}  // namespace rapforge
