#include "rapforge/domain.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace rapforge {

using json = nlohmann::ordered_json;

std::string to_string(ClipPolicy p) {
  return p == ClipPolicy::Clip01 ? "clip01" : "unclipped";
}
std::string to_string(ShapeKind s) {
  return s == ShapeKind::Circle ? "circle" : "square";
}
std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Kl: return "kl";
    case LossKind::L1: return "l1";
    case LossKind::L2: return "l2";
    case LossKind::Bce: return "bce";
    case LossKind::Dice: return "dice";
    case LossKind::KlPlusL1: return "kl_plus_l1";
  }
  return "kl";
}
std::string to_string(PlacementMode m) {
  switch (m) {
    case PlacementMode::OriginRadius: return "radius";
    case PlacementMode::QuadrantBottomRight: return "quadrant";
    case PlacementMode::Fixed: return "fixed";
  }
  return "radius";
}

ClipPolicy clip_policy_from_string(const std::string& s) {
  if (s == "clip01") return ClipPolicy::Clip01;
  if (s == "unclipped") return ClipPolicy::Unclipped;
  throw ParameterError("unknown clip policy: " + s);
}
ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "circle") return ShapeKind::Circle;
  if (s == "square") return ShapeKind::Square;
  throw ParameterError("unknown shape: " + s);
}
LossKind loss_kind_from_string(const std::string& s) {
  if (s == "kl") return LossKind::Kl;
  if (s == "l1") return LossKind::L1;
  if (s == "l2") return LossKind::L2;
  if (s == "bce") return LossKind::Bce;
  if (s == "dice") return LossKind::Dice;
  if (s == "kl_plus_l1") return LossKind::KlPlusL1;
  throw ParameterError("unknown loss kind: " + s);
}
PlacementMode placement_mode_from_string(const std::string& s) {
  if (s == "radius") return PlacementMode::OriginRadius;
  if (s == "quadrant") return PlacementMode::QuadrantBottomRight;
  if (s == "fixed") return PlacementMode::Fixed;
  throw ParameterError("unknown placement mode: " + s);
}

void ForgeConfig::validate() const {
  auto fraction = [](double x, const char* name) {
    if (!(x > 0.0 && x <= 1.0))
      throw ParameterError(std::string(name) + " must lie in (0,1]");
  };
  fraction(success_threshold, "success_threshold");
  fraction(curriculum_trigger_asr, "curriculum_trigger_asr");
  fraction(lr_ramp_fraction, "lr_ramp_fraction");
  if (learning_rate <= 0.0) throw ParameterError("learning_rate must be positive");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (epoch_time_limit_s <= 0.0)
    throw ParameterError("epoch_time_limit_s must be positive");
  if (total_budget_s <= 0.0 && max_steps <= 0)
    throw ParameterError("either total_budget_s or max_steps must be set");
  if (patch_size < 1) throw ParameterError("patch_size must be >= 1");
  if (scale_min < 1 || scale_max < scale_min)
    throw ParameterError("scale range must satisfy 1 <= scale_min <= scale_max");
  if (curriculum_step_px < 0) throw ParameterError("curriculum_step_px must be >= 0");
  if (convergence_window < 2) throw ParameterError("convergence_window must be >= 2");
}

const Scene& validate_scene(const Scene& s) {
  for (double x : s.pixels.v) {
    if (!(x >= 0.0 && x <= 1.0))
      throw RangeError("scene '" + s.id + "': pixel value " + std::to_string(x) +
                       " outside [0,1]");
  }
  if (s.labels) {
    if (s.labels->h != s.pixels.h || s.labels->w != s.pixels.w)
      throw ShapeError("scene '" + s.id + "': label dims " +
                       std::to_string(s.labels->h) + "x" + std::to_string(s.labels->w) +
                       " do not match pixel dims " + std::to_string(s.pixels.h) + "x" +
                       std::to_string(s.pixels.w));
  }
  return s;
}

void validate_report(const AttackReport& r) {
  double successes = 0.0;
  for (const auto& c : r.per_scene) {
    if (!(c.mean_confidence >= 0.0 && c.mean_confidence <= 1.0))
      throw RangeError("report confidence outside [0,1]");
    successes += c.success ? 1.0 : 0.0;
  }
  if (!r.per_scene.empty()) {
    const double rate = successes / static_cast<double>(r.per_scene.size());
    if (std::abs(rate - r.success_rate) > 1e-12)
      throw RangeError("report success_rate does not equal mean of success flags");
  }
}

void snap_f32(Array3& a) {
  for (double& x : a.v) x = snap_f32(x);
}

void save_patch(const Patch& p, const std::string& stem) {
  const std::string bin_path = stem + ".patch.bin";
  const std::string json_path = stem + ".patch.json";

  std::vector<float> buf(p.values.size());
  for (size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(p.values.v[i]);

  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot open " + bin_path + " for writing");
  bin.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!bin) throw IoError("short write to " + bin_path);
  bin.close();

  json j;
  j["height"] = p.values.h;
  j["width"] = p.values.w;
  j["channels"] = p.values.c;
  j["origin"] = {p.origin.row, p.origin.col};
  j["scale_range"] = {p.scale_min, p.scale_max};
  j["placement_radius"] = p.placement_radius;
  j["clip_policy"] = to_string(p.clip_policy);
  j["class_index"] = p.class_index;
  j["loss_kind"] = to_string(p.loss_kind);
  j["seed"] = p.seed;

  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + json_path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write to " + json_path);
}

Patch load_patch(const std::string& stem) {
  const std::string bin_path = stem + ".patch.bin";
  const std::string json_path = stem + ".patch.json";

  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw FormatError(json_path + ": " + e.what());
  }

  Patch p;
  const int h = j.at("height").get<int>();
  const int w = j.at("width").get<int>();
  const int c = j.at("channels").get<int>();
  if (h < 1 || w < 1 || c < 1) throw FormatError(json_path + ": bad dims");
  p.values = Array3(h, w, c);
  p.origin = {j.at("origin")[0].get<int>(), j.at("origin")[1].get<int>()};
  p.scale_min = j.at("scale_range")[0].get<int>();
  p.scale_max = j.at("scale_range")[1].get<int>();
  p.placement_radius = j.at("placement_radius").get<int>();
  p.clip_policy = clip_policy_from_string(j.at("clip_policy").get<std::string>());
  p.class_index = j.at("class_index").get<int>();
  p.loss_kind = loss_kind_from_string(j.at("loss_kind").get<std::string>());
  p.seed = j.at("seed").get<uint64_t>();

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path);
  bin.seekg(0, std::ios::end);
  const auto bytes = static_cast<size_t>(bin.tellg());
  bin.seekg(0);
  const size_t expected = p.values.size() * sizeof(float);
  if (bytes != expected)
    throw FormatError(bin_path + ": byte length " + std::to_string(bytes) +
                      " does not equal height*width*channels*4 = " +
                      std::to_string(expected));
  std::vector<float> buf(p.values.size());
  bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
  if (!bin) throw IoError("short read from " + bin_path);
  for (size_t i = 0; i < buf.size(); ++i)
    p.values.v[i] = static_cast<double>(buf[i]);
  if (p.clip_policy == ClipPolicy::Clip01)
    for (double v : p.values.v)
      if (!(v >= 0.0 && v <= 1.0))
        throw RangeError(bin_path + ": clip01 patch holds values outside [0,1]");
  return p;
}

}  // namespace rapforge
