#include "rapforge/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "rapforge/png_io.hpp"

namespace rapforge {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

SuccessResult attack_success(const ProbMap& y, const RegionSpec& region,
                             double threshold) {
  if (y.probs.h != region.height() || y.probs.w != region.width() ||
      y.probs.c != region.channels())
    throw ShapeError("attack_success: probability map does not match region dims");
  if (region.score_footprint.empty())
    throw DegenerateObjectiveError("attack_success: empty scoring footprint");

  const int k = region.class_index;
  int above = 0;
  double conf_sum = 0.0;
  for (const Coord& px : region.score_footprint) {
    const double c = y.probs.at(px.row, px.col, k);
    conf_sum += c;
    if (c > 0.5) ++above;
  }
  const double n = static_cast<double>(region.score_footprint.size());
  SuccessResult r;
  r.mean_confidence = conf_sum / n;
  r.success = (static_cast<double>(above) / n) >= threshold;
  return r;
}

namespace {

struct SceneEval {
  bool omitted = false;
  double clean_conf = 0.0;
  std::vector<CaseResult> cases;
};

double safe_rel_increase(double attacked, double clean) {
  return (attacked - clean) / std::max(clean, 1e-9);
}

}  // namespace

AttackReport evaluate_patch(const Patch& patch, VictimModel& victim,
                            const DatasetSplit& data, const RegionSpec& region,
                            const EvalOptions& opt) {
  if (opt.n_draws < 1) throw ParameterError("evaluate_patch: n_draws must be >= 1");
  const int n_scenes = static_cast<int>(data.scenes.size());
  std::vector<SceneEval> evals(n_scenes);

  const int workers = std::max(1, worker_count());
  std::vector<std::unique_ptr<VictimModel>> clones;
  for (int w = 0; w < workers; ++w) clones.push_back(victim.clone());

  parallel_for(n_scenes, [&](int w, int i) {
    VictimModel& model = *clones[w];
    const Scene& scene = data.scenes[i];
    SceneEval& ev = evals[i];

    const ProbMap clean = predict(model, scene);
    const SuccessResult clean_score = attack_success(clean, region, opt.success_threshold);
    ev.clean_conf = clean_score.mean_confidence;
    if (clean_score.success) {
      // The targeted region already reads as the target class.
      ev.omitted = true;
      return;
    }
    Rng scene_rng = Rng(opt.seed).split("eval").split(static_cast<uint64_t>(i));
    for (int d = 0; d < opt.n_draws; ++d) {
      Rng draw = scene_rng.split(static_cast<uint64_t>(d));
      const Placement pl = sample_placement(patch, scene.pixels.h, scene.pixels.w,
                                            draw, opt.mode);
      const Scene composed = apply(scene, patch, pl);
      const ProbMap probs = predict(model, composed);
      const SuccessResult score = attack_success(probs, region, opt.success_threshold);
      CaseResult cr;
      cr.scene_id = scene.id;
      cr.placement = pl.location;
      cr.scale = pl.scale;
      cr.success = score.success;
      cr.mean_confidence = score.mean_confidence;
      ev.cases.push_back(cr);
    }
  });

  AttackReport report;
  report.seed = opt.seed;
  report.n_draws = opt.n_draws;
  double conf_sum = 0.0, rel_sum = 0.0;
  int successes = 0, kept = 0;
  for (const auto& ev : evals) {
    if (ev.omitted) {
      ++report.n_omitted;
      continue;
    }
    ++kept;
    double scene_conf = 0.0;
    for (const auto& c : ev.cases) {
      report.per_scene.push_back(c);
      conf_sum += c.mean_confidence;
      scene_conf += c.mean_confidence;
      if (c.success) ++successes;
    }
    rel_sum += safe_rel_increase(scene_conf / std::max<size_t>(1, ev.cases.size()),
                                 ev.clean_conf);
  }
  report.n_scenes = kept;
  if (report.per_scene.empty()) {
    std::fprintf(stderr, "warning: empty report (all %d scenes omitted)\n",
                 report.n_omitted);
  } else {
    report.success_rate = static_cast<double>(successes) / report.per_scene.size();
    report.mean_confidence = conf_sum / report.per_scene.size();
    report.conf_rel_increase = rel_sum / kept;
  }

  SweepRow row;
  row.parameter = "evaluate";
  row.value = to_string(opt.mode);
  row.n_scenes = report.n_scenes;
  row.n_draws = report.n_draws;
  row.asr = report.success_rate;
  row.mean_conf = report.mean_confidence;
  row.conf_rel_increase = report.conf_rel_increase;
  report.sweep_table.push_back(row);
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

std::string to_string(SweepParameter p) {
  switch (p) {
    case SweepParameter::PatchSize: return "patch_size";
    case SweepParameter::PatchLocation: return "patch_location";
    case SweepParameter::TargetSize: return "target_size";
    case SweepParameter::TargetLocation: return "target_location";
  }
  return "patch_size";
}

SweepParameter sweep_parameter_from_string(const std::string& s) {
  if (s == "patch_size") return SweepParameter::PatchSize;
  if (s == "patch_location") return SweepParameter::PatchLocation;
  if (s == "target_size") return SweepParameter::TargetSize;
  if (s == "target_location") return SweepParameter::TargetLocation;
  throw ParameterError("unknown sweep parameter: " + s);
}

std::vector<Coord> diagonal_locations(int h, int w, int n, int footprint) {
  std::vector<Coord> out;
  const Coord start{h / 2, w / 2};
  const Coord end{std::max(0, h - footprint), std::max(0, w - footprint)};
  for (int i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    out.push_back({static_cast<int>(std::lround(start.row + t * (end.row - start.row))),
                   static_cast<int>(std::lround(start.col + t * (end.col - start.col)))});
  }
  return out;
}

std::vector<Coord> lattice_locations(int h, int w, int cols, int rows) {
  std::vector<Coord> out;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out.push_back({static_cast<int>(std::lround((r + 0.5) * h / rows)),
                     static_cast<int>(std::lround((c + 0.5) * w / cols))});
  return out;
}

AttackReport sweep(const ForgeFn& forge_fn, SweepParameter param,
                   const std::vector<int>& int_grid,
                   const std::vector<Coord>& coord_grid, VictimModel& victim,
                   const DatasetSplit& eval_data, const SweepSetup& setup,
                   int grid_rows, int grid_cols) {
  if (eval_data.scenes.empty()) throw ConfigurationError("sweep: empty dataset");
  const int h = eval_data.height(), w = eval_data.width();
  const auto [oh, ow] = victim.output_dims(h, w);

  AttackReport report;
  report.seed = setup.cfg.seed;
  report.heatmap_rows = grid_rows;
  report.heatmap_cols = grid_cols;

  auto base_region = [&]() {
    return build_region(oh, ow, victim.k(), setup.target_center, setup.class_index,
                        setup.target_radius, setup.target_shape);
  };

  const size_t n_points = (param == SweepParameter::PatchSize ||
                           param == SweepParameter::TargetSize)
                              ? int_grid.size()
                              : coord_grid.size();
  for (size_t i = 0; i < n_points; ++i) {
    SweepRow row;
    row.parameter = to_string(param);
    ForgeConfig cfg = setup.cfg;
    cfg.seed = setup.cfg.seed + i; // fresh patch per grid point
    RegionSpec region;
    try {
      switch (param) {
        case SweepParameter::PatchSize: {
          const int s = int_grid[i];
          row.value = std::to_string(s);
          if (s < 1 || s > std::min(h, w))
            throw ParameterError("patch footprint out of bounds");
          cfg.scale_min = cfg.scale_max = s;
          region = base_region();
          break;
        }
        case SweepParameter::PatchLocation: {
          const Coord loc = coord_grid[i];
          row.value = "(" + std::to_string(loc.row) + ";" + std::to_string(loc.col) + ")";
          if (loc.row < 0 || loc.col < 0 || loc.row + cfg.scale_max > h ||
              loc.col + cfg.scale_max > w)
            throw ParameterError("patch footprint out of bounds");
          cfg.patch_origin = loc;
          cfg.placement_mode = PlacementMode::Fixed;
          region = base_region();
          break;
        }
        case SweepParameter::TargetSize: {
          const int r = int_grid[i];
          row.value = std::to_string(r);
          region = build_region(oh, ow, victim.k(), setup.target_center,
                                setup.class_index, r, setup.target_shape);
          // Score on the locked base footprint.
          region.score_footprint = base_region().score_footprint;
          break;
        }
        case SweepParameter::TargetLocation: {
          const Coord loc = coord_grid[i];
          row.value = "(" + std::to_string(loc.row) + ";" + std::to_string(loc.col) + ")";
          region = build_region(oh, ow, victim.k(), loc, setup.class_index,
                                setup.target_radius, setup.target_shape);
          break;
        }
      }
    } catch (const ParameterError&) {
      row.skipped = true;
      report.sweep_table.push_back(row);
      continue;
    }

    const Patch patch = forge_fn(cfg, region);
    EvalOptions eval = setup.eval;
    eval.seed = setup.eval.seed + i;
    const AttackReport point = evaluate_patch(patch, victim, eval_data, region, eval);
    row.n_scenes = point.n_scenes;
    row.n_draws = point.n_draws;
    row.asr = point.success_rate;
    row.mean_conf = point.mean_confidence;
    row.conf_rel_increase = point.conf_rel_increase;
    report.sweep_table.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

AttackReport transfer_matrix(const std::vector<Patch>& patches,
                             const std::vector<VictimModel*>& victims,
                             const std::vector<std::string>& victim_names,
                             const DatasetSplit& data, const RegionSpec& region,
                             const EvalOptions& opt) {
  if (victims.size() < 2)
    throw ParameterError("transfer_matrix: need at least two victims");
  if (patches.size() != victims.size())
    throw ParameterError("transfer_matrix: one patch per victim required");

  const int h = data.height(), w = data.width();
  const auto dims0 = victims.front()->output_dims(h, w);
  for (auto* v : victims)
    if (v->output_dims(h, w) != dims0 || v->k() != victims.front()->k())
      throw ShapeError("transfer_matrix: victim output dims disagree");

  AttackReport report;
  report.seed = opt.seed;
  report.n_draws = opt.n_draws;
  report.victim_names = victim_names;
  const size_t n = victims.size();
  report.transfer_matrix.assign(n, std::vector<double>(n, 0.0));
  report.transfer_rel_increase.assign(n, std::vector<double>(n, 0.0));

  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      const AttackReport cell =
          evaluate_patch(patches[i], *victims[j], data, region, opt);
      report.transfer_matrix[i][j] = cell.success_rate;
      report.transfer_rel_increase[i][j] = cell.conf_rel_increase;
      SweepRow row;
      row.parameter = "transfer";
      row.value = victim_names[i] + "->" + victim_names[j];
      row.n_scenes = cell.n_scenes;
      row.n_draws = cell.n_draws;
      row.asr = cell.success_rate;
      row.mean_conf = cell.mean_confidence;
      row.conf_rel_increase = cell.conf_rel_increase;
      report.sweep_table.push_back(row);
    }
  return report;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

void color_ramp(double t, uint8_t* rgb) {
  // Dark blue -> cyan -> yellow -> red.
  t = std::clamp(t, 0.0, 1.0);
  const double stops[4][3] = {
      {0.05, 0.05, 0.35}, {0.05, 0.65, 0.75}, {0.95, 0.85, 0.15}, {0.75, 0.05, 0.05}};
  const double pos = t * 3.0;
  const int s = std::min(2, static_cast<int>(pos));
  const double f = pos - s;
  for (int c = 0; c < 3; ++c) {
    const double v = stops[s][c] + f * (stops[s + 1][c] - stops[s][c]);
    rgb[c] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
}

void render_heatmap_png(const AttackReport& r, const std::string& path) {
  const int rows = r.heatmap_rows, cols = r.heatmap_cols;
  const int cell = 24;
  const int h = rows * cell, w = cols * cell;
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3, 255);
  for (int i = 0; i < rows * cols && i < static_cast<int>(r.sweep_table.size()); ++i) {
    const SweepRow& row = r.sweep_table[i];
    uint8_t col[3] = {210, 210, 210}; // skipped cells stay gray
    if (!row.skipped) color_ramp(row.asr, col);
    const int cy = (i / cols) * cell, cx = (i % cols) * cell;
    for (int y = cy; y < cy + cell; ++y)
      for (int x = cx; x < cx + cell; ++x)
        for (int c = 0; c < 3; ++c)
          rgb[(static_cast<size_t>(y) * w + x) * 3 + c] = col[c];
  }
  write_png_rgb(path, h, w, rgb);
}

void render_curve_png(const AttackReport& r, const std::string& path) {
  const int h = 320, w = 480, margin = 24;
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3, 255);
  auto put = [&](int y, int x, uint8_t cr, uint8_t cg, uint8_t cb) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    uint8_t* p = &rgb[(static_cast<size_t>(y) * w + x) * 3];
    p[0] = cr;
    p[1] = cg;
    p[2] = cb;
  };
  // Axes.
  for (int x = margin; x < w - margin; ++x) put(h - margin, x, 0, 0, 0);
  for (int y = margin; y < h - margin; ++y) put(y, margin, 0, 0, 0);

  std::vector<const SweepRow*> rows;
  for (const auto& row : r.sweep_table)
    if (!row.skipped) rows.push_back(&row);
  if (rows.size() < 2) {
    write_png_rgb(path, h, w, rgb);
    return;
  }
  auto yof = [&](double v) {
    return h - margin - static_cast<int>(std::lround(v * (h - 2 * margin)));
  };
  auto xof = [&](size_t i) {
    return margin + static_cast<int>(std::lround(static_cast<double>(i) *
                                                 (w - 2 * margin) / (rows.size() - 1)));
  };
  auto line = [&](int y0, int x0, int y1, int x1, uint8_t cr, uint8_t cg, uint8_t cb) {
    const int steps = std::max(std::abs(y1 - y0), std::abs(x1 - x0)) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      put(static_cast<int>(std::lround(y0 + t * (y1 - y0))),
          static_cast<int>(std::lround(x0 + t * (x1 - x0))), cr, cg, cb);
    }
  };
  for (size_t i = 0; i + 1 < rows.size(); ++i) {
    line(yof(rows[i]->asr), xof(i), yof(rows[i + 1]->asr), xof(i + 1), 200, 30, 30);
    line(yof(rows[i]->mean_conf), xof(i), yof(rows[i + 1]->mean_conf), xof(i + 1), 30,
         30, 200);
  }
  write_png_rgb(path, h, w, rgb);
}

std::string csv_field(const std::string& s) {
  if (s.find(',') == std::string::npos && s.find('"') == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

void render_reports(const AttackReport& report, const std::string& out_dir,
                    const std::string& base_name, bool plotting) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw IoError("cannot create output directory " + out_dir);

  const std::string base = (fs::path(out_dir) / base_name).string();

  std::ofstream csv(base + ".csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write " + base + ".csv");
  csv << "parameter,value,n_scenes,n_draws,asr,mean_conf,conf_rel_increase\n";
  if (report.sweep_table.empty())
    std::fprintf(stderr, "warning: report is empty; emitting headers only\n");
  char buf[256];
  for (const auto& row : report.sweep_table) {
    if (row.skipped) {
      csv << csv_field(row.parameter) << "," << csv_field(row.value)
          << ",0,0,skipped,skipped,skipped\n";
      continue;
    }
    std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.6f", row.n_scenes, row.n_draws,
                  row.asr, row.mean_conf, row.conf_rel_increase);
    csv << csv_field(row.parameter) << "," << csv_field(row.value) << "," << buf
        << "\n";
  }
  csv.close();

  json j;
  j["seed"] = report.seed;
  if (!report.config_echo.empty()) {
    try {
      j["config"] = json::parse(report.config_echo);
    } catch (...) {
      j["config"] = report.config_echo;
    }
  }
  j["aggregates"] = {{"asr", report.success_rate},
                     {"mean_conf", report.mean_confidence},
                     {"conf_rel_increase", report.conf_rel_increase},
                     {"n_scenes", report.n_scenes},
                     {"n_draws", report.n_draws},
                     {"n_omitted", report.n_omitted}};
  j["rows"] = json::array();
  for (const auto& row : report.sweep_table) {
    json r = {{"parameter", row.parameter}, {"value", row.value},
              {"n_scenes", row.n_scenes},   {"n_draws", row.n_draws},
              {"asr", row.asr},             {"mean_conf", row.mean_conf},
              {"conf_rel_increase", row.conf_rel_increase}};
    if (row.skipped) r["skipped"] = true;
    j["rows"].push_back(r);
  }
  if (!report.per_scene.empty()) {
    j["cases"] = json::array();
    for (const auto& c : report.per_scene)
      j["cases"].push_back({{"scene", c.scene_id},
                            {"placement", {c.placement.row, c.placement.col}},
                            {"scale", c.scale},
                            {"success", c.success},
                            {"mean_confidence", c.mean_confidence}});
  }
  if (!report.transfer_matrix.empty()) {
    j["victims"] = report.victim_names;
    j["transfer_asr"] = report.transfer_matrix;
    j["transfer_rel_increase"] = report.transfer_rel_increase;
  }
  std::ofstream jf(base + ".json", std::ios::trunc);
  if (!jf) throw IoError("cannot write " + base + ".json");
  jf << j.dump(2) << "\n";
  jf.close();

  if (plotting) {
    if (report.heatmap_rows > 0 && report.heatmap_cols > 0)
      render_heatmap_png(report, base + ".png");
    else if (report.sweep_table.size() >= 2)
      render_curve_png(report, base + ".png");
  }
}

}  // namespace rapforge
