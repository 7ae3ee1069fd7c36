#include "rapforge/forge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rapforge/placement.hpp"

namespace rapforge {

using json = nlohmann::ordered_json;

CurriculumState curriculum_step(const CurriculumState& state, const ForgeConfig& cfg,
                                bool converged_or_timeout) {
  const bool advance =
      converged_or_timeout || state.asr_recent >= cfg.curriculum_trigger_asr;
  if (!advance) return state;

  CurriculumState out = state;
  out.current_radius =
      std::min(state.current_radius + cfg.curriculum_step_px, cfg.max_radius);
  if (cfg.grow_pool)
    out.images_in_pool =
        std::min(state.images_in_pool + cfg.pool_step, state.pool_max);
  if (cfg.grow_scale && cfg.scale_step > 0)
    out.scale_hi = std::min(state.scale_hi + cfg.scale_step, cfg.scale_max);
  out.last_trigger_step = state.step;
  out.epoch_start_step = state.step;
  out.epoch_start_time = state.now;
  out.lr_current = cfg.lr_ramp_fraction * state.lr_base;
  return out;
}

bool detect_convergence(const std::vector<double>& losses, int window,
                        double tolerance) {
  if (window < 2) throw ParameterError("detect_convergence: window must be >= 2");
  const int n = static_cast<int>(losses.size());
  if (n < 2 * window) return false;
  double prev = 0.0, recent = 0.0;
  for (int i = n - 2 * window; i < n - window; ++i) prev += losses[i];
  for (int i = n - window; i < n; ++i) recent += losses[i];
  prev /= window;
  recent /= window;
  const double improvement = (prev - recent) / std::max(std::abs(prev), 1e-12);
  return improvement < tolerance;
}

double ramped_lr(const ForgeConfig& cfg, long step, long last_trigger_step) {
  if (last_trigger_step < 0) return cfg.learning_rate;
  const long k = step - last_trigger_step;
  if (k >= cfg.lr_ramp_steps) return cfg.learning_rate;
  const double f = cfg.lr_ramp_fraction;
  const double t = static_cast<double>(k) / cfg.lr_ramp_steps;
  return cfg.learning_rate * (f + (1.0 - f) * t);
}

int covering_radius(Coord origin, int scene_h, int scene_w, int scale_min) {
  const int row_hi = std::max(0, scene_h - scale_min);
  const int col_hi = std::max(0, scene_w - scale_min);
  return std::max({origin.row, row_hi - origin.row, origin.col, col_hi - origin.col, 0});
}

namespace {

struct ItemResult {
  Array3 dpatch;
  double loss = 0.0;
  bool success = false;
};

}  // namespace

ForgeResult forge_patch(VictimModel& victim, const DatasetSplit& data,
                        const RegionSpec& region, const ForgeConfig& cfg,
                        bool incremental) {
  cfg.validate();
  if (!victim.differentiable())
    throw CapabilityError("forge_patch: victim does not expose input gradients");
  if (data.scenes.empty()) throw ConfigurationError("forge_patch: empty dataset");
  if (region.support.empty())
    throw DegenerateObjectiveError("forge_patch: empty region");

  const int h = data.height(), w = data.width();
  const auto [oh, ow] = victim.output_dims(h, w);
  if (region.height() != oh || region.width() != ow ||
      region.channels() != victim.k())
    throw ShapeError("forge_patch: region dims do not match victim output");

  const bool deterministic = cfg.max_steps > 0;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  Rng root(cfg.seed);
  Rng init_rng = root.split("init");
  Rng pool_rng = root.split("pool");
  Rng batch_rng = root.split("batch");

  // Step 0 of the procedure: random patch at its origin.
  ForgeResult result;
  Patch& patch = result.patch;
  patch.values = Array3(cfg.patch_size, cfg.patch_size, 3);
  for (double& v : patch.values.v) v = snap_f32(init_rng.uniform());
  patch.origin = cfg.patch_origin;
  patch.scale_min = cfg.scale_min;
  patch.scale_max = cfg.scale_max;
  patch.clip_policy = cfg.clip_policy;
  patch.class_index = region.class_index;
  patch.loss_kind = cfg.loss_kind;
  patch.seed = cfg.seed;

  // Incremental runs grow from one image and radius zero.
  const int n_scenes = static_cast<int>(data.scenes.size());
  std::vector<int> pool_order(n_scenes);
  std::iota(pool_order.begin(), pool_order.end(), 0);
  for (int i = n_scenes; i > 1; --i)
    std::swap(pool_order[i - 1], pool_order[pool_rng.uniform_int(0, i - 1)]);

  CurriculumState state;
  state.pool_max = n_scenes;
  state.images_in_pool = incremental ? 1 : n_scenes;
  state.current_radius = incremental ? 0 : cfg.max_radius;
  state.scale_hi = (incremental && cfg.grow_scale) ? cfg.scale_min : cfg.scale_max;
  state.lr_base = cfg.learning_rate;
  state.lr_current = cfg.learning_rate;
  patch.placement_radius = state.current_radius;
  if (incremental && cfg.grow_scale && cfg.scale_step > 0)
    patch.scale_max = state.scale_hi;

  const int workers = std::max(1, worker_count());
  std::vector<std::unique_ptr<VictimModel>> clones;
  for (int i = 0; i < workers; ++i) clones.push_back(victim.clone());

  AdamaxState opt;
  std::vector<double> losses;
  const int b = cfg.batch_size;

  for (long step = 0;; ++step) {
    state.step = step;
    state.now = deterministic ? 0.0 : elapsed();

    // Termination.
    if (deterministic) {
      if (step >= cfg.max_steps) break;
    } else if (cfg.total_budget_s > 0.0 && state.now >= cfg.total_budget_s) {
      break;
    }
    // Full-run convergence exit. EoT losses are noisy and a non-improving
    // window alone fires on noise, so the exit additionally requires that
    // the run has actually improved on its opening window.
    const int run_window = 2 * cfg.convergence_window;
    if (state.images_in_pool == n_scenes && state.current_radius >= cfg.max_radius &&
        static_cast<int>(losses.size()) >= 2 * run_window &&
        detect_convergence(losses, run_window, cfg.convergence_tol)) {
      double first = 0.0, recent = 0.0;
      for (int i = 0; i < run_window; ++i) first += losses[i];
      for (size_t i = losses.size() - run_window; i < losses.size(); ++i)
        recent += losses[i];
      first /= run_window;
      recent /= run_window;
      if ((first - recent) / std::max(std::abs(first), 1e-12) >=
          10.0 * cfg.convergence_tol) {
        result.converged = true;
        break;
      }
    }

    // Curriculum (incremental runs only), spaced by min_epoch_steps. Once
    // radius, pool, and scale are saturated there is nothing left to grow,
    // and the lr ramp is left alone to settle back to base.
    const bool can_grow =
        state.current_radius < cfg.max_radius ||
        (cfg.grow_pool && state.images_in_pool < n_scenes) ||
        (cfg.grow_scale && cfg.scale_step > 0 && state.scale_hi < cfg.scale_max);
    if (incremental && can_grow && step > 0 &&
        step - std::max(state.last_trigger_step, 0L) >= cfg.min_epoch_steps) {
      const bool timeout =
          !deterministic && (state.now - state.epoch_start_time >= cfg.epoch_time_limit_s);
      bool epoch_conv = false;
      const long epoch_len = step - state.epoch_start_step;
      if (epoch_len >= 2 * cfg.convergence_window) {
        const std::vector<double> tail(losses.end() - epoch_len, losses.end());
        epoch_conv = detect_convergence(tail, cfg.convergence_window, cfg.convergence_tol);
      }
      const CurriculumState next = curriculum_step(state, cfg, timeout || epoch_conv);
      if (next.last_trigger_step == step) {
        state = next;
        patch.placement_radius = state.current_radius;
        patch.scale_max = cfg.grow_scale ? state.scale_hi : patch.scale_max;
      }
    }

    const double lr = ramped_lr(cfg, step, state.last_trigger_step);
    state.lr_current = lr;

    // Draw all batch randomness up front so threading cannot affect it.
    std::vector<const Scene*> batch_scenes(b);
    std::vector<Placement> placements(b);
    for (int i = 0; i < b; ++i) {
      const int pick = static_cast<int>(
          batch_rng.uniform_int(0, state.images_in_pool - 1));
      batch_scenes[i] = &data.scenes[pool_order[pick]];
      placements[i] = sample_placement(patch, h, w, batch_rng, cfg.placement_mode);
    }

    std::vector<ItemResult> items(b);
    parallel_for(b, [&](int worker, int i) {
      VictimModel& model = *clones[worker];
      const Scene composed = apply(*batch_scenes[i], patch, placements[i]);
      const ProbMap probs = model.predict(composed);
      Array3 dy;
      items[i].loss =
          attack_loss(probs.probs, region, cfg.loss_kind, &dy, cfg.kl_swap_direction);
      const Array3 dscene = model.input_gradient(dy);
      items[i].dpatch = apply_backward(dscene, patch, placements[i]);
      items[i].success =
          attack_success(probs, region, cfg.success_threshold).success;
    });

    Array3 dpatch(cfg.patch_size, cfg.patch_size, 3);
    double loss_mean = 0.0;
    int successes = 0;
    for (int i = 0; i < b; ++i) {
      loss_mean += items[i].loss / b;
      if (items[i].success) ++successes;
      for (size_t j = 0; j < dpatch.v.size(); ++j)
        dpatch.v[j] += items[i].dpatch.v[j] / b;
    }
    state.asr_recent = static_cast<double>(successes) / b;

    adamax_step(patch.values.v, dpatch.v, opt, lr);
    if (patch.clip_policy == ClipPolicy::Clip01)
      for (double& v : patch.values.v) v = std::clamp(v, 0.0, 1.0);
    snap_f32(patch.values);

    losses.push_back(loss_mean);
    result.log.push_back({step, loss_mean, state.asr_recent, state.current_radius, lr,
                          state.images_in_pool, deterministic ? 0.0 : elapsed()});
  }

  result.state = state;
  return result;
}

void write_log_jsonl(const std::vector<LogRecord>& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : log) {
    json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["asr"] = r.asr;
    j["radius"] = r.radius;
    j["lr"] = r.lr;
    j["pool"] = r.pool;
    j["elapsed_s"] = r.elapsed_s;
    out << j.dump() << "\n";
  }
}

std::vector<LogRecord> read_log_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
    LogRecord r;
    r.step = j.at("step").get<long>();
    r.loss = j.at("loss").get<double>();
    r.asr = j.at("asr").get<double>();
    r.radius = j.at("radius").get<int>();
    r.lr = j.at("lr").get<double>();
    r.pool = j.at("pool").get<int>();
    r.elapsed_s = j.at("elapsed_s").get<double>();
    out.push_back(r);
  }
  return out;
}

}  // namespace rapforge
