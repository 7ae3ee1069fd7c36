#include "rapforge/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rapforge/data.hpp"
#include "rapforge/evaluation.hpp"
#include "rapforge/forge.hpp"
#include "rapforge/objective.hpp"
#include "rapforge/png_io.hpp"
#include "rapforge/victim.hpp"

namespace rapforge {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

Coord parse_coord(const std::string& s, const char* flag) {
  const auto comma = s.find(',');
  if (comma == std::string::npos)
    throw ParameterError(std::string(flag) + ": expected ROW,COL");
  try {
    return {std::stoi(s.substr(0, comma)), std::stoi(s.substr(comma + 1))};
  } catch (...) {
    throw ParameterError(std::string(flag) + ": expected ROW,COL");
  }
}

std::pair<int, int> parse_dims(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ParameterError("--dims: expected HxW");
  try {
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (...) {
    throw ParameterError("--dims: expected HxW");
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// Grid spec: "a,b,c" or "lo:hi:step".
std::vector<int> parse_int_grid(const std::string& s) {
  std::vector<int> out;
  if (s.find(':') != std::string::npos) {
    const auto parts = split_list(s);
    std::stringstream ss(s);
    std::string a, b, c;
    std::getline(ss, a, ':');
    std::getline(ss, b, ':');
    std::getline(ss, c, ':');
    const int lo = std::stoi(a), hi = std::stoi(b);
    const int step = c.empty() ? 1 : std::stoi(c);
    if (step < 1 || hi < lo) throw ParameterError("--grid: bad LO:HI:STEP range");
    for (int v = lo; v <= hi; v += step) out.push_back(v);
    (void)parts;
  } else {
    for (const auto& item : split_list(s)) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw ParameterError("--grid: empty grid");
  return out;
}

// Root seed splitting: every subsystem of a subcommand draws from its own
// stream so artifacts are reproducible from the echoed config alone.
uint64_t seed_for(uint64_t root, const std::string& subsystem) {
  return subsystem_seed(root, subsystem);
}

// Flat JSON config: each key is a long option name; explicit command-line
// flags override config values.
std::vector<std::string> apply_config_file(const std::vector<std::string>& args) {
  std::string config_path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw IoError("cannot open config " + config_path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw FormatError(config_path + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(config_path + ": expected a flat JSON object");

  auto explicitly_set = [&](const std::string& flag) {
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };

  // Subcommand name stays first; config-derived flags go right after it so
  // later explicit flags win under TakeLast.
  std::vector<std::string> out;
  size_t insert_at = 0;
  if (!args.empty() && args[0][0] != '-') {
    out.push_back(args[0]);
    insert_at = 1;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string flag = "--" + it.key();
    if (explicitly_set(flag)) continue;
    if (it.value().is_boolean()) {
      if (it.value().get<bool>()) out.push_back(flag);
    } else if (it.value().is_string()) {
      out.push_back(flag + "=" + it.value().get<std::string>());
    } else {
      out.push_back(flag + "=" + it.value().dump());
    }
  }
  for (size_t i = insert_at; i < args.size(); ++i) out.push_back(args[i]);
  return out;
}

std::string echo_config(const CLI::App* sub) {
  json j;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_name();
    if (name.empty() || name[0] != '-') continue;
    if (!opt->get_configurable()) continue;
    const auto& results = opt->results();
    if (results.empty()) continue;
    j[opt->get_single_name()] = results.size() == 1 ? json(results[0]) : json(results);
  }
  return j.dump();
}

struct RegionFlags {
  int class_index = 2;
  std::string center = "48,64";
  int radius = 10;
  std::string shape = "square";
  std::string stencil;
  std::string anchor = "0,0";
  int operation_radius = 0;

  void add_to(CLI::App* sub) {
    sub->add_option("--class", class_index, "target class index k");
    sub->add_option("--center", center, "target center ROW,COL (output-map coords)");
    sub->add_option("--radius", radius, "target radius in pixels/cells");
    sub->add_option("--shape", shape, "target shape: square|circle");
    sub->add_option("--stencil", stencil, "monochrome PNG stencil for custom targets");
    sub->add_option("--anchor", anchor, "stencil top-left ROW,COL");
    sub->add_option("--operation-radius", operation_radius,
                    "mask dilation around a stencil target");
  }

  RegionSpec build(int oh, int ow, int k) const {
    if (!stencil.empty()) {
      const PngImage img = read_png(stencil);
      Array2i bits(img.h, img.w);
      for (size_t i = 0; i < bits.v.size(); ++i) {
        const int lum = img.rgb[i * 3] + img.rgb[i * 3 + 1] + img.rgb[i * 3 + 2];
        bits.v[i] = lum > 0 ? 1 : 0;
      }
      return build_custom_target(oh, ow, k, class_index, bits,
                                 parse_coord(anchor, "--anchor"), operation_radius);
    }
    return build_region(oh, ow, k, parse_coord(center, "--center"), class_index,
                        radius, shape_kind_from_string(shape));
  }
};

struct ForgeFlags {
  std::string loss = "kl";
  double lr = 2.5;
  int batch = 8;
  double budget = 180.0;
  long steps = 0;
  int patch_size = 32;
  std::string origin = "56,84";
  std::string scale;
  int placement_radius = -1;
  bool incremental = false;
  bool unclipped = false;
  std::string placement = "radius";
  double epoch_limit = 60.0;
  double trigger_asr = 0.25;
  int step_px = 1;
  double ramp_fraction = 0.1;
  int ramp_steps = 50;
  bool kl_swap = false;

  void add_to(CLI::App* sub) {
    sub->add_option("--loss", loss, "kl|l1|l2|bce|dice|kl_plus_l1");
    sub->add_option("--lr", lr, "patch learning rate");
    sub->add_option("--batch", batch, "batch size");
    sub->add_option("--budget", budget, "wall-clock budget in seconds");
    sub->add_option("--steps", steps,
                    "deterministic step count (disables wall-clock limits)");
    sub->add_option("--patch-size", patch_size, "native patch side in pixels");
    sub->add_option("--origin", origin, "patch origin ROW,COL (top-left)");
    sub->add_option("--scale", scale, "patch scale range LO,HI (default native size)");
    sub->add_option("--placement-radius", placement_radius,
                    "max placement radius (default: covers the image when incremental)");
    sub->add_flag("--incremental", incremental, "incremental curriculum training");
    sub->add_flag("--unclipped", unclipped, "do not clip patch pixels to [0,1]");
    sub->add_option("--placement", placement, "radius|quadrant|fixed");
    sub->add_option("--epoch-limit", epoch_limit, "curriculum epoch time limit (s)");
    sub->add_option("--trigger-asr", trigger_asr, "curriculum ASR trigger");
    sub->add_option("--step-px", step_px, "radius increment per trigger");
    sub->add_option("--ramp-fraction", ramp_fraction, "lr drop fraction at triggers");
    sub->add_option("--ramp-steps", ramp_steps, "lr ramp length in steps");
    sub->add_flag("--kl-swap", kl_swap, "use KL(y||t) instead of KL(t||y)");
  }

  ForgeConfig build(uint64_t seed, int scene_h, int scene_w) const {
    ForgeConfig cfg;
    cfg.loss_kind = loss_kind_from_string(loss);
    cfg.learning_rate = lr;
    cfg.batch_size = batch;
    cfg.total_budget_s = budget;
    cfg.max_steps = steps;
    cfg.patch_size = patch_size;
    cfg.patch_origin = parse_coord(origin, "--origin");
    if (scale.empty()) {
      cfg.scale_min = cfg.scale_max = patch_size;
    } else {
      const Coord sc = parse_coord(scale, "--scale");
      cfg.scale_min = sc.row;
      cfg.scale_max = sc.col;
    }
    cfg.clip_policy = unclipped ? ClipPolicy::Unclipped : ClipPolicy::Clip01;
    cfg.placement_mode = placement_mode_from_string(placement);
    cfg.epoch_time_limit_s = epoch_limit;
    cfg.curriculum_trigger_asr = trigger_asr;
    cfg.curriculum_step_px = step_px;
    cfg.lr_ramp_fraction = ramp_fraction;
    cfg.lr_ramp_steps = ramp_steps;
    cfg.kl_swap_direction = kl_swap;
    cfg.seed = seed;
    if (placement_radius >= 0)
      cfg.max_radius = placement_radius;
    else if (incremental)
      cfg.max_radius = covering_radius(cfg.patch_origin, scene_h, scene_w, cfg.scale_min);
    else
      cfg.max_radius = 0;
    return cfg;
  }
};

int cmd_gen_data(const std::string& out, int n, const std::string& dims,
                 uint64_t seed, double rule_p, double cue_p, bool force,
                 const std::string& split) {
  const auto [h, w] = parse_dims(dims);
  ContextRule rule;
  rule.p_cue = cue_p;
  rule.p_blob_given_cue = rule_p;
  const DatasetSplit data =
      generate_contextual_corpus(n, h, w, rule, seed_for(seed, "data"), split);
  save_dataset(data, out, force);
  std::printf("wrote %d scenes (%dx%d, K=%d) to %s\n", n, h, w, data.k(), out.c_str());
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args) {
  CLI::App app{"rapforge: remote adversarial patch toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "flat JSON config supplying any flag")
      ->expected(1);

  // gen-data -------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a contextual corpus");
  struct {
    int n = 200;
    std::string dims = "96x128";
    uint64_t seed = 0;
    std::string out;
    double rule = 0.9;
    double cue = 0.5;
    bool force = false;
    std::string split = "train";
  } g;
  gen->add_option("--n", g.n, "number of scenes")->required();
  gen->add_option("--dims", g.dims, "scene dims HxW");
  gen->add_option("--seed", g.seed, "root seed");
  gen->add_option("--out", g.out, "output dataset directory")->required();
  gen->add_option("--rule", g.rule, "P(blob | cue)");
  gen->add_option("--cue", g.cue, "P(cue)");
  gen->add_flag("--force", g.force, "overwrite a non-empty directory");
  gen->add_option("--split", g.split, "split name tag");

  // train-victim ----------------------------------------------------------
  auto* tv = app.add_subcommand("train-victim", "train a desk-scale victim model");
  struct {
    std::string data, out;
    std::string arch = "skip";
    int width = 8;
    int epochs = 15;
    int epochs_encoder = 8;
    int batch = 8;
    double lr = 1e-3;
    uint64_t seed = 0;
  } t;
  tv->add_option("--data", t.data)->required();
  tv->add_option("--out", t.out)->required();
  tv->add_option("--arch", t.arch, "skip|noskip|detect");
  tv->add_option("--width", t.width, "base channel count");
  tv->add_option("--epochs", t.epochs, "decoder/detector epochs");
  tv->add_option("--epochs-encoder", t.epochs_encoder, "phase-one epochs");
  tv->add_option("--batch", t.batch);
  tv->add_option("--lr", t.lr);
  tv->add_option("--seed", t.seed);

  // forge ------------------------------------------------------------------
  auto* fg = app.add_subcommand("forge", "synthesize an adversarial patch");
  struct {
    std::string victim, data, out;
    uint64_t seed = 0;
  } f;
  RegionFlags f_region;
  ForgeFlags f_forge;
  fg->add_option("--victim", f.victim)->required();
  fg->add_option("--data", f.data)->required();
  fg->add_option("--out", f.out, "output bundle stem")->required();
  fg->add_option("--seed", f.seed);
  f_region.add_to(fg);
  f_forge.add_to(fg);

  // evaluate ----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "score a patch over EoT draws");
  struct {
    std::string patch, victim, data, out;
    std::string name = "report";
    int draws = 20;
    uint64_t seed = 0;
    double threshold = 0.8;
    std::string placement = "radius";
    int placement_radius = -1;
    bool plot = false;
  } e;
  RegionFlags e_region;
  ev->add_option("--patch", e.patch, "patch bundle stem")->required();
  ev->add_option("--victim", e.victim)->required();
  ev->add_option("--data", e.data)->required();
  ev->add_option("--out", e.out, "report directory")->required();
  ev->add_option("--name", e.name, "report base name");
  ev->add_option("--draws", e.draws, "EoT draws per scene");
  ev->add_option("--seed", e.seed);
  ev->add_option("--threshold", e.threshold, "coverage fraction for success");
  ev->add_option("--placement", e.placement, "radius|quadrant|fixed");
  ev->add_option("--placement-radius", e.placement_radius,
                 "override the patch's placement radius");
  ev->add_flag("--plot", e.plot, "emit PNG plots");
  e_region.add_to(ev);

  // sweep --------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "re-forge and evaluate over a grid");
  struct {
    std::string victim, data, out;
    std::string param = "patch_size";
    std::string grid;
    std::string name;
    int draws = 1;
    uint64_t seed = 0;
    bool plot = false;
  } s;
  RegionFlags s_region;
  ForgeFlags s_forge;
  // The sweep's locked-row defaults target full-scale street scenes; pass
  // desk-scale overrides explicitly.
  s_region.center = "250,250";
  s_region.radius = 20;
  s_forge.origin = "370,270";
  s_forge.patch_size = 80;
  s_forge.lr = 2.5;
  sw->add_option("--victim", s.victim)->required();
  sw->add_option("--data", s.data)->required();
  sw->add_option("--out", s.out)->required();
  sw->add_option("--param", s.param,
                 "patch_size|patch_location|target_size|target_location");
  sw->add_option("--grid", s.grid,
                 "sizes: LO:HI:STEP or list; locations: COLSxROWS or count");
  sw->add_option("--name", s.name, "report base name (default: the parameter)");
  sw->add_option("--draws", s.draws);
  sw->add_option("--seed", s.seed);
  sw->add_flag("--plot", s.plot);
  s_region.add_to(sw);
  s_forge.add_to(sw);

  // transfer -------------------------------------------------------------------
  auto* tr = app.add_subcommand("transfer", "cross-victim transfer matrix");
  struct {
    std::string patches, victims, data, out;
    std::string name = "transfer";
    int draws = 20;
    uint64_t seed = 0;
    bool plot = false;
  } x;
  RegionFlags x_region;
  tr->add_option("--patches", x.patches, "comma-separated patch stems")->required();
  tr->add_option("--victims", x.victims, "comma-separated checkpoints")->required();
  tr->add_option("--data", x.data)->required();
  tr->add_option("--out", x.out)->required();
  tr->add_option("--name", x.name);
  tr->add_option("--draws", x.draws);
  tr->add_option("--seed", x.seed);
  tr->add_flag("--plot", x.plot);
  x_region.add_to(tr);

  for (auto* sub : app.get_subcommands({})) {
    // The config file is consumed in a pre-pass; accept the flag anywhere.
    sub->add_option("--config", config_path, "flat JSON config supplying any flag");
    for (auto* opt : sub->get_options())
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  try {
    const auto args = apply_config_file(raw_args);
    std::vector<const char*> argv;
    argv.push_back("rapforge");
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());

    if (gen->parsed())
      return cmd_gen_data(g.out, g.n, g.dims, g.seed, g.rule, g.cue, g.force, g.split);

    if (tv->parsed()) {
      const DatasetSplit data = load_dataset(t.data, "train");
      std::unique_ptr<VictimModel> victim;
      TrainReport report;
      TrainConfig cfg{t.batch, t.lr, seed_for(t.seed, "victim")};
      if (t.arch == "detect") {
        victim = train_detector(data, t.epochs, cfg, t.width, &report);
      } else if (t.arch == "skip" || t.arch == "noskip") {
        TrainReport phase1;
        TrainConfig cfg1{t.batch, t.lr, seed_for(t.seed, "encoder")};
        const Encoder enc =
            train_encoder_classifier(data, t.epochs_encoder, cfg1, t.width, &phase1);
        victim = train_segmenter(enc, t.arch == "skip", data, t.epochs, cfg, &report);
        std::printf("phase1 accuracy %.3f\n", phase1.final_metric);
      } else {
        throw ParameterError("--arch must be skip|noskip|detect");
      }
      save_victim(*victim, t.out);
      std::printf("saved %s (%s/%s, final loss %.4f)\n", t.out.c_str(),
                  victim->architecture().c_str(), victim->encoder_tag().c_str(),
                  report.final_metric);
      return 0;
    }

    if (fg->parsed()) {
      auto victim = load_victim(f.victim);
      const DatasetSplit data = load_dataset(f.data, "train");
      const auto [oh, ow] = victim->output_dims(data.height(), data.width());
      const RegionSpec region = f_region.build(oh, ow, victim->k());
      const ForgeConfig cfg =
          f_forge.build(seed_for(f.seed, "forge"), data.height(), data.width());
      const ForgeResult res = forge_patch(*victim, data, region, cfg, f_forge.incremental);
      save_patch(res.patch, f.out);
      write_log_jsonl(res.log, f.out + ".log.jsonl");
      std::printf("forged %s: %zu steps, final loss %.5f, asr %.3f%s\n", f.out.c_str(),
                  res.log.size(), res.log.empty() ? 0.0 : res.log.back().loss,
                  res.state.asr_recent, res.converged ? " (converged)" : "");
      return 0;
    }

    if (ev->parsed()) {
      Patch patch = load_patch(e.patch);
      auto victim = load_victim(e.victim);
      const DatasetSplit data = load_dataset(e.data, "val");
      const auto [oh, ow] = victim->output_dims(data.height(), data.width());
      const RegionSpec region = e_region.build(oh, ow, victim->k());
      if (e.placement_radius >= 0) patch.placement_radius = e.placement_radius;
      EvalOptions opt;
      opt.n_draws = e.draws;
      opt.mode = placement_mode_from_string(e.placement);
      opt.seed = seed_for(e.seed, "eval");
      opt.success_threshold = e.threshold;
      AttackReport report = evaluate_patch(patch, *victim, data, region, opt);
      report.config_echo = echo_config(ev);
      render_reports(report, e.out, e.name, e.plot);
      std::printf("asr %.3f mean_conf %.3f over %d scenes x %d draws (%d omitted)\n",
                  report.success_rate, report.mean_confidence, report.n_scenes,
                  report.n_draws, report.n_omitted);
      return 0;
    }

    if (sw->parsed()) {
      auto victim = load_victim(s.victim);
      const DatasetSplit data = load_dataset(s.data, "test");
      const SweepParameter param = sweep_parameter_from_string(s.param);

      SweepSetup setup;
      setup.cfg = s_forge.build(seed_for(s.seed, "sweep"), data.height(), data.width());
      setup.target_center = parse_coord(s_region.center, "--center");
      setup.target_radius = s_region.radius;
      setup.target_shape = shape_kind_from_string(s_region.shape);
      setup.class_index = s_region.class_index;
      setup.eval.n_draws = s.draws;
      setup.eval.mode = s_forge.incremental ? PlacementMode::OriginRadius
                                            : PlacementMode::Fixed;
      setup.eval.seed = seed_for(s.seed, "sweep-eval");

      std::vector<int> int_grid;
      std::vector<Coord> coord_grid;
      int grid_rows = 0, grid_cols = 0;
      switch (param) {
        case SweepParameter::PatchSize:
          int_grid = s.grid.empty() ? std::vector<int>{30, 55, 80, 105, 130}
                                    : parse_int_grid(s.grid);
          break;
        case SweepParameter::TargetSize:
          int_grid = s.grid.empty() ? std::vector<int>{20, 85, 150, 215, 280}
                                    : parse_int_grid(s.grid);
          break;
        case SweepParameter::PatchLocation: {
          const int n = s.grid.empty() ? 6 : std::stoi(s.grid);
          coord_grid = diagonal_locations(data.height(), data.width(), n,
                                          setup.cfg.scale_max);
          break;
        }
        case SweepParameter::TargetLocation: {
          int cols = 8, rows = 6;
          if (!s.grid.empty()) {
            const auto [r, c] = parse_dims(s.grid); // ROWSxCOLS
            rows = r;
            cols = c;
          }
          const auto [oh, ow] = victim->output_dims(data.height(), data.width());
          coord_grid = lattice_locations(oh, ow, cols, rows);
          grid_rows = rows;
          grid_cols = cols;
          break;
        }
      }

      ForgeFn forge_fn = [&](const ForgeConfig& cfg, const RegionSpec& region) {
        return forge_patch(*victim, data, region, cfg, s_forge.incremental).patch;
      };
      AttackReport report = sweep(forge_fn, param, int_grid, coord_grid, *victim,
                                  data, setup, grid_rows, grid_cols);
      report.config_echo = echo_config(sw);
      render_reports(report, s.out, s.name.empty() ? s.param : s.name, s.plot);
      std::printf("sweep %s: %zu points written to %s\n", s.param.c_str(),
                  report.sweep_table.size(), s.out.c_str());
      return 0;
    }

    if (tr->parsed()) {
      const auto patch_stems = split_list(x.patches);
      const auto victim_paths = split_list(x.victims);
      if (patch_stems.size() != victim_paths.size())
        throw ParameterError("transfer: --patches and --victims must pair up");
      std::vector<Patch> patches;
      std::vector<std::unique_ptr<VictimModel>> owned;
      std::vector<VictimModel*> victims;
      std::vector<std::string> names;
      for (size_t i = 0; i < patch_stems.size(); ++i) {
        patches.push_back(load_patch(patch_stems[i]));
        owned.push_back(load_victim(victim_paths[i]));
        victims.push_back(owned.back().get());
        names.push_back(fs::path(victim_paths[i]).stem().string());
      }
      const DatasetSplit data = load_dataset(x.data, "test");
      const auto [oh, ow] = victims.front()->output_dims(data.height(), data.width());
      const RegionSpec region = x_region.build(oh, ow, victims.front()->k());
      EvalOptions opt;
      opt.n_draws = x.draws;
      opt.seed = seed_for(x.seed, "transfer");
      AttackReport report =
          transfer_matrix(patches, victims, names, data, region, opt);
      report.config_echo = echo_config(tr);
      render_reports(report, x.out, x.name, x.plot);
      std::printf("transfer matrix %zux%zu written to %s\n", victims.size(),
                  victims.size(), x.out.c_str());
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace rapforge
