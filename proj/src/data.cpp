#include "rapforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "rapforge/png_io.hpp"

namespace rapforge {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

// Snap to the 8-bit grid the PNG files store.
double quantize_u8(double x) { return std::floor(clamp01(x) * 255.0 + 0.5) / 255.0; }

int clampi(int x, int lo, int hi) { return x < lo ? lo : (x > hi ? hi : x); }

}  // namespace

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

void AugmentationSpec::validate() const {
  if (max_shift_frac < 0.0 || max_shift_frac > 0.5)
    throw ParameterError("max_shift_frac outside [0, 0.5]");
  if (min_crop_frac <= 0.5 || min_crop_frac > 1.0)
    throw ParameterError("min_crop_frac outside (0.5, 1]");
  if (max_brightness_delta < 0.0 || max_brightness_delta > 0.5)
    throw ParameterError("max_brightness_delta outside [0, 0.5]");
  if (gamma_lo < 0.25 || gamma_hi > 4.0 || gamma_lo > gamma_hi)
    throw ParameterError("gamma range outside [0.25, 4] or inverted");
  if (max_perspective_frac < 0.0 || max_perspective_frac > 0.2)
    throw ParameterError("max_perspective_frac outside [0, 0.2]");
}

AugmentationPlan draw_augmentation_plan(const AugmentationSpec& spec, int h, int w,
                                        Rng& rng) {
  spec.validate();
  AugmentationPlan p;
  if (spec.flip) p.do_flip = rng.bernoulli(0.5);
  if (spec.shift && rng.bernoulli(0.5)) {
    const int my = static_cast<int>(spec.max_shift_frac * h);
    const int mx = static_cast<int>(spec.max_shift_frac * w);
    p.shift_dy = static_cast<int>(rng.uniform_int(-my, my));
    p.shift_dx = static_cast<int>(rng.uniform_int(-mx, mx));
  }
  if (spec.crop && rng.bernoulli(0.5)) {
    p.do_crop = true;
    p.crop_h = static_cast<int>(rng.uniform_int(
        static_cast<int64_t>(std::ceil(spec.min_crop_frac * h)), h));
    p.crop_w = static_cast<int>(rng.uniform_int(
        static_cast<int64_t>(std::ceil(spec.min_crop_frac * w)), w));
    p.crop_top = static_cast<int>(rng.uniform_int(0, h - p.crop_h));
    p.crop_left = static_cast<int>(rng.uniform_int(0, w - p.crop_w));
  }
  if (spec.blur) p.do_blur = rng.bernoulli(0.5);
  if (spec.sharpen && !p.do_blur) p.do_sharpen = rng.bernoulli(0.5);
  if (spec.perspective && rng.bernoulli(0.5)) {
    p.do_perspective = true;
    for (auto& corner : p.persp) {
      corner[0] = rng.uniform(-spec.max_perspective_frac, spec.max_perspective_frac) * h;
      corner[1] = rng.uniform(-spec.max_perspective_frac, spec.max_perspective_frac) * w;
    }
  }
  if (spec.brightness && rng.bernoulli(0.5))
    p.brightness_delta = rng.uniform(-spec.max_brightness_delta, spec.max_brightness_delta);
  if (spec.gamma && rng.bernoulli(0.5)) p.gamma = rng.uniform(spec.gamma_lo, spec.gamma_hi);
  return p;
}

namespace {

// Samples pixels bilinearly and labels by nearest neighbor at the same
// source coordinate; coordinates are clamped to the image.
struct Resampler {
  const Array3& px;
  const Array2i* lb;
  Array3 out_px;
  Array2i out_lb;

  Resampler(const Scene& s, int oh, int ow)
      : px(s.pixels), lb(s.labels ? &*s.labels : nullptr),
        out_px(oh, ow, s.pixels.c) {
    if (lb) out_lb = Array2i(oh, ow);
  }

  void sample(int oy, int ox, double sy, double sx) {
    const int h = px.h, w = px.w;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
    sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
    const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double dy = sy - y0, dx = sx - x0;
    for (int c = 0; c < px.c; ++c) {
      const double v = (1 - dy) * ((1 - dx) * px.at(y0, x0, c) + dx * px.at(y0, x1, c)) +
                       dy * ((1 - dx) * px.at(y1, x0, c) + dx * px.at(y1, x1, c));
      out_px.at(oy, ox, c) = v;
    }
    if (lb) {
      const int ny = static_cast<int>(std::lround(sy));
      const int nx = static_cast<int>(std::lround(sx));
      out_lb.at(oy, ox) = lb->at(clampi(ny, 0, h - 1), clampi(nx, 0, w - 1));
    }
  }
};

Scene repack(const Scene& s, Resampler&& r) {
  Scene out;
  out.id = s.id;
  out.pixels = std::move(r.out_px);
  if (s.labels) out.labels = std::move(r.out_lb);
  return out;
}

Array3 box_blur3(const Array3& a) {
  Array3 out(a.h, a.w, a.c);
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x)
      for (int c = 0; c < a.c; ++c) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += a.at(clampi(y + dy, 0, a.h - 1), clampi(x + dx, 0, a.w - 1), c);
        out.at(y, x, c) = acc / 9.0;
      }
  return out;
}

}  // namespace

Scene augment_with_plan(const Scene& s, const AugmentationPlan& plan) {
  const int h = s.pixels.h, w = s.pixels.w;
  Scene cur = s;

  if (plan.do_flip) {
    Resampler r(cur, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) r.sample(y, x, y, w - 1 - x);
    cur = repack(cur, std::move(r));
  }
  if (plan.shift_dy != 0 || plan.shift_dx != 0) {
    Resampler r(cur, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        r.sample(y, x, y - plan.shift_dy, x - plan.shift_dx);
    cur = repack(cur, std::move(r));
  }
  if (plan.do_crop) {
    if (plan.crop_h > h || plan.crop_w > w || plan.crop_h < 1 || plan.crop_w < 1)
      throw ParameterError("crop window larger than image");
    Resampler r(cur, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double sy = plan.crop_top + (h == 1 ? 0.0
                                                  : static_cast<double>(y) * (plan.crop_h - 1) / (h - 1));
        const double sx = plan.crop_left + (w == 1 ? 0.0
                                                   : static_cast<double>(x) * (plan.crop_w - 1) / (w - 1));
        r.sample(y, x, sy, sx);
      }
    cur = repack(cur, std::move(r));
  }
  if (plan.do_perspective) {
    Resampler r(cur, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = h == 1 ? 0.0 : static_cast<double>(y) / (h - 1);
        const double u = w == 1 ? 0.0 : static_cast<double>(x) / (w - 1);
        // Corner-pin warp: source corner positions are the image corners
        // plus the drawn offsets, interpolated bilinearly.
        const double sy = (1 - v) * ((1 - u) * (0 + plan.persp[0][0]) + u * (0 + plan.persp[1][0])) +
                          v * ((1 - u) * (h - 1 + plan.persp[2][0]) + u * (h - 1 + plan.persp[3][0]));
        const double sx = (1 - v) * ((1 - u) * (0 + plan.persp[0][1]) + u * (w - 1 + plan.persp[1][1])) +
                          v * ((1 - u) * (0 + plan.persp[2][1]) + u * (w - 1 + plan.persp[3][1]));
        r.sample(y, x, sy, sx);
      }
    cur = repack(cur, std::move(r));
  }

  // Photometric ops: labels untouched.
  if (plan.do_blur) cur.pixels = box_blur3(cur.pixels);
  if (plan.do_sharpen) {
    const Array3 blurred = box_blur3(cur.pixels);
    for (size_t i = 0; i < cur.pixels.v.size(); ++i)
      cur.pixels.v[i] = clamp01(cur.pixels.v[i] + 0.6 * (cur.pixels.v[i] - blurred.v[i]));
  }
  if (plan.brightness_delta != 0.0)
    for (double& x : cur.pixels.v) x = clamp01(x + plan.brightness_delta);
  if (plan.gamma != 1.0)
    for (double& x : cur.pixels.v) x = std::pow(clamp01(x), plan.gamma);
  return cur;
}

Scene augment(const Scene& s, const AugmentationSpec& spec, Rng& rng) {
  return augment_with_plan(s, draw_augmentation_plan(spec, s.pixels.h, s.pixels.w, rng));
}

// ---------------------------------------------------------------------------
// Contextual corpus
// ---------------------------------------------------------------------------

std::vector<ClassDef> contextual_class_defs() {
  return {
      {"background", 0, {0, 0, 0}},
      {"band", 1, {255, 0, 255}},
      {"blob", 2, {255, 128, 0}},
      {"decoy", 3, {0, 128, 255}},
  };
}

DatasetSplit generate_contextual_corpus(int n, int height, int width,
                                        const ContextRule& rule, uint64_t seed,
                                        const std::string& split_name) {
  if (n < 1) throw ParameterError("corpus size must be >= 1");
  if (height < 32 || width < 32)
    throw ParameterError("dims too small for cue+blob geometry (need >= 32x32)");

  const int band_top = std::max(1, height / 16);
  const int band_h = std::max(4, height / 8);
  const int r_lo = std::max(3, height / 12);
  const int r_hi = std::max(r_lo, height / 9);

  DatasetSplit split;
  split.split_name = split_name;
  split.classes = contextual_class_defs();
  split.scenes.resize(n);

  Rng root(seed);
  for (int i = 0; i < n; ++i) {
    Rng rng = root.split(static_cast<uint64_t>(i));
    Scene& s = split.scenes[i];
    char buf[16];
    std::snprintf(buf, sizeof(buf), "ctx%05d", i);
    s.id = buf;
    s.pixels = Array3(height, width, 3);
    s.labels = Array2i(height, width, kClassBackground);

    // Background: per-scene base color plus white noise.
    const double base[3] = {rng.uniform(0.30, 0.70), rng.uniform(0.30, 0.70),
                            rng.uniform(0.30, 0.70)};
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < 3; ++c)
          s.pixels.at(y, x, c) = base[c] + rng.normal(0.0, 0.03);

    // Distractor rectangles (labeled background).
    const int n_rects = static_cast<int>(rng.uniform_int(0, 3));
    for (int rct = 0; rct < n_rects; ++rct) {
      const int rh = static_cast<int>(rng.uniform_int(height / 8, height / 3));
      const int rw = static_cast<int>(rng.uniform_int(width / 8, width / 3));
      const int ry = static_cast<int>(rng.uniform_int(0, height - rh));
      const int rx = static_cast<int>(rng.uniform_int(0, width - rw));
      const double col[3] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                             rng.uniform(0.2, 0.8)};
      for (int y = ry; y < ry + rh; ++y)
        for (int x = rx; x < rx + rw; ++x)
          for (int c = 0; c < 3; ++c)
            s.pixels.at(y, x, c) = 0.75 * s.pixels.at(y, x, c) + 0.25 * col[c];
    }

    // Context draw.
    const bool cue = rng.bernoulli(rule.p_cue);
    int disk_class = -1;
    if (cue) {
      if (rng.bernoulli(rule.p_blob_given_cue)) disk_class = kClassBlob;
    } else {
      const double u = rng.uniform();
      if (u < rule.p_blob_given_nocue)
        disk_class = kClassBlob;
      else if (u < rule.p_blob_given_nocue + rule.p_decoy_given_nocue)
        disk_class = kClassDecoy;
    }

    // Disk: identical appearance for blob and decoy; contrast varies down
    // to near-invisible so the model must lean on the cue.
    if (disk_class >= 0) {
      const int r = static_cast<int>(rng.uniform_int(r_lo, r_hi));
      const int cy = height / 2 + static_cast<int>(rng.uniform_int(-height / 24, height / 24));
      const int cx = width / 2 + static_cast<int>(rng.uniform_int(-width / 20, width / 20));
      const double alpha = rng.uniform(0.02, 0.50);
      const double tint[3] = {0.95, 0.60, 0.10};
      for (int y = std::max(0, cy - r); y <= std::min(height - 1, cy + r); ++y)
        for (int x = std::max(0, cx - r); x <= std::min(width - 1, cx + r); ++x) {
          const int dy = y - cy, dx = x - cx;
          if (dy * dy + dx * dx <= r * r) {
            for (int c = 0; c < 3; ++c)
              s.pixels.at(y, x, c) =
                  (1.0 - alpha) * s.pixels.at(y, x, c) + alpha * tint[c];
            s.labels->at(y, x) = disk_class;
          }
        }
    }

    // Cue band: high-contrast vertical stripes near the top.
    if (cue) {
      const int phase = static_cast<int>(rng.uniform_int(0, 7));
      const double jitter = rng.uniform(-0.05, 0.05);
      for (int y = band_top; y < band_top + band_h; ++y)
        for (int x = 0; x < width; ++x) {
          const bool a = (((x + phase) / 4) % 2) == 0;
          const double c1[3] = {0.90 + jitter, 0.15, 0.80};
          const double c2[3] = {0.10, 0.85 + jitter, 0.20};
          for (int c = 0; c < 3; ++c)
            s.pixels.at(y, x, c) = a ? c1[c] : c2[c];
          s.labels->at(y, x) = kClassBand;
        }
    }

    for (double& x : s.pixels.v) x = quantize_u8(x);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

namespace {

std::vector<ClassDef> read_classes_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty())
    throw FormatError(path + ": expected non-empty \"classes\" array");
  std::vector<ClassDef> out;
  for (const auto& c : j["classes"]) {
    ClassDef d;
    d.name = c.at("name").get<std::string>();
    d.index = c.at("index").get<int>();
    const auto& col = c.at("color");
    d.color = {col[0].get<uint8_t>(), col[1].get<uint8_t>(), col[2].get<uint8_t>()};
    out.push_back(d);
  }
  std::sort(out.begin(), out.end(),
            [](const ClassDef& a, const ClassDef& b) { return a.index < b.index; });
  for (size_t i = 0; i < out.size(); ++i)
    if (out[i].index != static_cast<int>(i))
      throw FormatError(path + ": class indices must be 0..K-1 without gaps");
  return out;
}

Array2i decode_labels(const PngImage& img, const std::vector<ClassDef>& classes,
                      const std::string& path) {
  std::map<uint32_t, int> by_color;
  for (const auto& c : classes)
    by_color[(c.color[0] << 16) | (c.color[1] << 8) | c.color[2]] = c.index;

  Array2i out(img.h, img.w);
  if (img.indexed) {
    for (size_t i = 0; i < img.indices.size(); ++i) {
      const uint32_t key = (img.rgb[i * 3] << 16) | (img.rgb[i * 3 + 1] << 8) |
                           img.rgb[i * 3 + 2];
      const auto it = by_color.find(key);
      if (it == by_color.end()) {
        // Fall back to the raw index when the palette color is unmapped.
        const int idx = img.indices[i];
        if (idx >= static_cast<int>(classes.size()))
          throw FormatError(path + ": label index " + std::to_string(idx) +
                            " out of range");
        out.v[i] = idx;
      } else {
        out.v[i] = it->second;
      }
    }
  } else {
    for (size_t i = 0; i < out.v.size(); ++i) {
      const uint32_t key = (img.rgb[i * 3] << 16) | (img.rgb[i * 3 + 1] << 8) |
                           img.rgb[i * 3 + 2];
      const auto it = by_color.find(key);
      if (it == by_color.end())
        throw FormatError(path + ": pixel color not present in classes.json palette");
      out.v[i] = it->second;
    }
  }
  return out;
}

}  // namespace

DatasetSplit load_dataset(const std::string& root, const std::string& split_name) {
  DatasetSplit split;
  split.split_name = split_name;
  split.classes = read_classes_json((fs::path(root) / "classes.json").string());

  const fs::path images_dir = fs::path(root) / "images";
  const fs::path labels_dir = fs::path(root) / "labels";
  if (!fs::is_directory(images_dir))
    throw FormatError(root + ": missing images/ directory");
  const bool labeled = fs::is_directory(labels_dir);

  std::vector<fs::path> image_files;
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.is_regular_file() && e.path().extension() == ".png")
      image_files.push_back(e.path());
  std::sort(image_files.begin(), image_files.end());

  if (image_files.empty())
    std::fprintf(stderr, "warning: %s holds no images; returning empty split\n",
                 images_dir.c_str());

  for (const auto& img_path : image_files) {
    const PngImage img = read_png(img_path.string());
    Scene s;
    s.id = img_path.stem().string();
    s.pixels = Array3(img.h, img.w, 3);
    for (size_t i = 0; i < s.pixels.v.size(); ++i)
      s.pixels.v[i] = img.rgb[i] / 255.0;

    if (labeled) {
      const fs::path lbl_path = labels_dir / img_path.filename();
      if (!fs::exists(lbl_path))
        throw PairingError("image " + img_path.filename().string() +
                           " has no matching label file");
      const PngImage lbl = read_png(lbl_path.string());
      if (lbl.h != img.h || lbl.w != img.w)
        throw ShapeError(lbl_path.string() + ": label dims do not match image");
      s.labels = decode_labels(lbl, split.classes, lbl_path.string());
      for (int v : s.labels->v)
        if (v < 0 || v >= split.k())
          throw FormatError(lbl_path.string() + ": label out of range");
    }
    split.scenes.push_back(std::move(s));
  }

  // Spatial consistency across the split.
  for (const auto& s : split.scenes)
    if (s.pixels.h != split.height() || s.pixels.w != split.width())
      throw ShapeError("dataset scenes do not share spatial dims");
  return split;
}

void save_dataset(const DatasetSplit& split, const std::string& root, bool force) {
  const fs::path rootp(root);
  if (fs::exists(rootp) && !fs::is_empty(rootp) && !force)
    throw IoError(root + " exists and is not empty (use force to overwrite)");
  fs::create_directories(rootp / "images");
  const bool labeled =
      !split.scenes.empty() && split.scenes.front().labels.has_value();
  if (labeled) fs::create_directories(rootp / "labels");

  json j;
  j["classes"] = json::array();
  for (const auto& c : split.classes)
    j["classes"].push_back({{"name", c.name},
                            {"index", c.index},
                            {"color", {c.color[0], c.color[1], c.color[2]}}});
  std::ofstream out(rootp / "classes.json");
  if (!out) throw IoError("cannot write classes.json");
  out << j.dump(2) << "\n";

  std::vector<std::array<uint8_t, 3>> palette;
  for (const auto& c : split.classes) palette.push_back(c.color);

  for (const auto& s : split.scenes) {
    std::vector<uint8_t> rgb(s.pixels.v.size());
    for (size_t i = 0; i < rgb.size(); ++i)
      rgb[i] = static_cast<uint8_t>(std::lround(clamp01(s.pixels.v[i]) * 255.0));
    write_png_rgb((rootp / "images" / (s.id + ".png")).string(), s.pixels.h,
                  s.pixels.w, rgb);
    if (labeled) {
      if (!s.labels) throw PairingError("scene " + s.id + " lacks labels");
      std::vector<uint8_t> idx(s.labels->v.size());
      for (size_t i = 0; i < idx.size(); ++i)
        idx[i] = static_cast<uint8_t>(s.labels->v[i]);
      write_png_indexed((rootp / "labels" / (s.id + ".png")).string(), s.labels->h,
                        s.labels->w, idx, palette);
    }
  }
}

int derive_image_label(const Scene& s, int k) {
  if (!s.labels) throw ConfigurationError("scene has no labels");
  std::vector<int> counts(k, 0);
  for (int v : s.labels->v)
    if (v >= 0 && v < k) ++counts[v];
  int best = kClassBackground, best_count = 0;
  for (int c = 1; c < k; ++c)
    if (counts[c] > best_count) {
      best = c;
      best_count = counts[c];
    }
  return best_count > 0 ? best : kClassBackground;
}

}  // namespace rapforge
