#include <doctest.h>

#include <fstream>

#include "rapforge/victim.hpp"
#include "test_support.hpp"

using namespace rapforge;
using rapforge::testing::rel_err;

namespace {

// Small labeled corpus for fast training tests.
DatasetSplit tiny_corpus(int n, uint64_t seed) {
  return generate_contextual_corpus(n, 48, 64, ContextRule{}, seed);
}

double scalar_of(const Array3& probs, const Array3& w) {
  double acc = 0;
  for (size_t i = 0; i < probs.v.size(); ++i) acc += probs.v[i] * w.v[i];
  return acc;
}

}  // namespace

TEST_CASE("predict returns a full-size probability map in range") {
  for (bool skip : {true, false}) {
    SegVictim victim = rapforge::testing::tiny_seg_victim(3, skip);
    const Scene s = rapforge::testing::random_scene(16, 24, 4);
    const ProbMap pm = predict(victim, s);
    CHECK(pm.probs.h == 16);
    CHECK(pm.probs.w == 24);
    CHECK(pm.probs.c == 4);
    for (double v : pm.probs.v) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("inference is deterministic and finite on constant scenes") {
  SegVictim victim = rapforge::testing::tiny_seg_victim(5);
  Scene zero;
  zero.pixels = Array3(8, 8, 3, 0.0);
  const ProbMap a = victim.predict(zero);
  const ProbMap b = victim.predict(zero);
  CHECK(a.probs.v == b.probs.v);
  for (double v : a.probs.v) CHECK(std::isfinite(v));
}

TEST_CASE("dim mismatch raises a shape error") {
  SegVictim victim = rapforge::testing::tiny_seg_victim(6);
  Scene bad = rapforge::testing::random_scene(9, 12, 7); // 9 not divisible by 8
  CHECK_THROWS_AS(victim.predict(bad), ShapeError);
}

TEST_CASE("input gradients match central differences on 8x8 scenes") {
  for (bool skip : {true, false}) {
    SegVictim victim = rapforge::testing::tiny_seg_victim(8, skip);
    const Scene s = rapforge::testing::random_scene(8, 8, 9);
    Array3 w(8, 8, 4);
    Rng rng(10);
    for (double& v : w.v) v = rng.uniform(-1, 1);

    victim.predict(s);
    const Array3 din = victim.input_gradient(w);
    for (size_t i = 0; i < s.pixels.v.size(); i += 5) {
      const double fd = rapforge::testing::central_diff(
          [&](double x) {
            SegVictim v2 = victim;
            Scene s2 = s;
            s2.pixels.v[i] = x;
            return scalar_of(v2.predict(s2).probs, w);
          },
          s.pixels.v[i]);
      CHECK(rel_err(din.v[i], fd) < 1e-3);
    }
  }
}

TEST_CASE("dice loss formula endpoints") {
  Array3 x(4, 4, 1, 0.0), y(4, 4, 1, 0.0);
  for (int i = 0; i < 8; ++i) {
    x.v[i] = 1.0;
    y.v[i] = 1.0;
  }
  CHECK(dice_loss(x, y) == doctest::Approx(0.0).epsilon(1e-9));

  Array3 z(4, 4, 1, 0.0);
  for (int i = 8; i < 16; ++i) z.v[i] = 1.0;
  CHECK(dice_loss(x, z) == doctest::Approx(1.0).epsilon(1e-6));

  // Loss decreases as overlap improves.
  Array3 half = z;
  half.v[0] = 1.0;
  CHECK(dice_loss(x, half) < dice_loss(x, z));

  // Gradient check.
  Rng rng(21);
  Array3 p(4, 4, 2), t(4, 4, 2);
  for (double& v : p.v) v = rng.uniform(0.1, 0.9);
  for (double& v : t.v) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  Array3 dp;
  dice_loss(p, t, &dp);
  for (size_t i = 0; i < p.v.size(); i += 3) {
    const double fd = rapforge::testing::central_diff(
        [&](double v) {
          Array3 p2 = p;
          p2.v[i] = v;
          return dice_loss(p2, t);
        },
        p.v[i]);
    CHECK(rel_err(dp.v[i], fd) < 1e-5);
  }
}

TEST_CASE("two-phase training contracts") {
  const DatasetSplit data = tiny_corpus(24, 31);

  // Oracle for phase 1: the majority-class baseline accuracy.
  std::vector<int> labels;
  for (const auto& s : data.scenes) labels.push_back(derive_image_label(s, 4));
  std::vector<int> counts(4, 0);
  for (int l : labels) ++counts[l];
  const double majority_baseline =
      static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
      labels.size();

  TrainReport rep1;
  const Encoder enc =
      train_encoder_classifier(data, 30, TrainConfig{8, 2e-3, 5}, 6, &rep1);
  CHECK(rep1.epoch_loss.front() > rep1.epoch_loss.back()); // loss decreased
  CHECK(rep1.final_metric > 1.0 / 4.0);
  CHECK(rep1.final_metric > majority_baseline);

  // Phase 2 freezes the encoder bitwise.
  const uint64_t enc_hash = weights_hash(enc.params());
  TrainReport rep2;
  auto victim = train_segmenter(enc, true, data, 3, TrainConfig{8, 2e-3, 6}, &rep2);
  CHECK(weights_hash(enc.params()) == enc_hash);
  CHECK(rep2.epoch_loss.size() == 3); // dice recorded per epoch

  auto* seg = dynamic_cast<SegVictim*>(victim.get());
  REQUIRE(seg != nullptr);
  const auto enc_after = seg->net().encoder_params();
  std::vector<const Param*> cview(enc_after.begin(), enc_after.end());
  CHECK(weights_hash(cview) == enc_hash);
}

TEST_CASE("epochs=0 returns initialization weights with a warning") {
  const DatasetSplit data = tiny_corpus(6, 33);
  TrainReport rep;
  const Encoder enc =
      train_encoder_classifier(data, 0, TrainConfig{4, 1e-3, 7}, 4, &rep);
  const Encoder fresh = make_encoder(4, 7);
  CHECK(weights_hash(enc.params()) == weights_hash(fresh.params()));
}

TEST_CASE("single-class data is a configuration error") {
  DatasetSplit data = tiny_corpus(4, 35);
  for (auto& s : data.scenes) s.labels = Array2i(48, 64, 0); // all background
  CHECK_THROWS_AS(
      train_encoder_classifier(data, 2, TrainConfig{4, 1e-3, 8}, 4, nullptr),
      ConfigurationError);
}

TEST_CASE("segmenter beats the all-background baseline on held-out data") {
  const DatasetSplit train = tiny_corpus(48, 41);
  const DatasetSplit held = generate_contextual_corpus(12, 48, 64, ContextRule{}, 43);

  const Encoder enc =
      train_encoder_classifier(train, 25, TrainConfig{8, 2e-3, 44}, 6, nullptr);
  auto victim = train_segmenter(enc, true, train, 12, TrainConfig{8, 2e-3, 45}, nullptr);

  long correct = 0, background = 0, total = 0;
  for (const auto& s : held.scenes) {
    const ProbMap pm = victim->predict(s);
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 64; ++x) {
        int best = 0;
        double bv = -1;
        for (int c = 0; c < 4; ++c)
          if (pm.probs.at(y, x, c) > bv) {
            bv = pm.probs.at(y, x, c);
            best = c;
          }
        if (best == s.labels->at(y, x)) ++correct;
        if (s.labels->at(y, x) == 0) ++background;
        ++total;
      }
  }
  // Oracle: the all-background predictor's accuracy from label statistics.
  CHECK(static_cast<double>(correct) / total >
        static_cast<double>(background) / total);
}

TEST_CASE("detector grid shapes and the attack surface product") {
  GridDetector det(4, 3, 51);
  Scene s = rapforge::testing::random_scene(96, 96, 52);
  const DetectionMaps maps = det.forward(s.pixels);
  CHECK(maps.objectness.h == 6);
  CHECK(maps.objectness.w == 6);
  CHECK(maps.class_probs.c == 3);
  CHECK(maps.boxes.c == 4);

  Scene bad = rapforge::testing::random_scene(40, 40, 53);
  CHECK_THROWS_AS(det.forward(bad.pixels), ShapeError);

  // Product identities.
  DetectionMaps m;
  m.objectness = Array3(2, 2, 1, 1.0);
  m.class_probs = Array3(2, 2, 2, 0.0);
  m.class_probs.at(0, 0, 1) = 0.7;
  const Array3 surf = detection_attack_surface(m, 1);
  CHECK(surf.at(0, 0, 0) == doctest::Approx(0.7));
  m.objectness.fill(0.0);
  for (double v : detection_attack_surface(m, 1).v) CHECK(v == 0.0);

  // Hand-computed elementwise product.
  DetectionMaps h;
  h.objectness = Array3(2, 2, 1);
  h.objectness.at(0, 0, 0) = 0.5;
  h.objectness.at(0, 1, 0) = 1.0;
  h.objectness.at(1, 0, 0) = 0.0;
  h.objectness.at(1, 1, 0) = 1.0;
  h.class_probs = Array3(2, 2, 1);
  h.class_probs.at(0, 0, 0) = 1.0;
  h.class_probs.at(0, 1, 0) = 0.5;
  h.class_probs.at(1, 0, 0) = 1.0;
  h.class_probs.at(1, 1, 0) = 0.2;
  const Array3 got = detection_attack_surface(h, 0);
  CHECK(got.at(0, 0, 0) == doctest::Approx(0.5));
  CHECK(got.at(0, 1, 0) == doctest::Approx(0.5));
  CHECK(got.at(1, 0, 0) == doctest::Approx(0.0));
  CHECK(got.at(1, 1, 0) == doctest::Approx(0.2));
}

TEST_CASE("detection victim exposes input gradients through the product") {
  GridDetector det(4, 3, 61);
  DetectVictim victim(std::move(det), "d4");
  const Scene s = rapforge::testing::random_scene(32, 32, 62);
  Array3 w(2, 2, 3);
  Rng rng(63);
  for (double& v : w.v) v = rng.uniform(-1, 1);

  victim.predict(s);
  const Array3 din = victim.input_gradient(w);
  for (size_t i = 0; i < s.pixels.v.size(); i += 41) {
    const double fd = rapforge::testing::central_diff(
        [&](double x) {
          DetectVictim v2 = victim;
          Scene s2 = s;
          s2.pixels.v[i] = x;
          return scalar_of(v2.predict(s2).probs, w);
        },
        s.pixels.v[i]);
    CHECK(rel_err(din.v[i], fd) < 1e-3);
  }
}

TEST_CASE("trained detector keeps objectness low on empty scenes") {
  const DatasetSplit train = tiny_corpus(48, 71);
  auto victim = train_detector(train, 25, TrainConfig{8, 2e-3, 72}, 6, nullptr);
  auto* det = dynamic_cast<DetectVictim*>(victim.get());
  REQUIRE(det != nullptr);

  // Oracle: held-out scenes whose labels are entirely background.
  const DatasetSplit held = generate_contextual_corpus(40, 48, 64, ContextRule{}, 73);
  int checked = 0;
  for (const auto& s : held.scenes) {
    bool empty = true;
    for (int v : s.labels->v)
      if (v != 0) {
        empty = false;
        break;
      }
    if (!empty) continue;
    ++checked;
    const DetectionMaps maps = detect_grid(*det, s);
    double max_obj = 0.0;
    for (double v : maps.objectness.v) max_obj = std::max(max_obj, v);
    CHECK(max_obj < 0.5);
  }
  CHECK(checked > 0);
}

TEST_CASE("checkpoints round-trip weights and metadata") {
  const std::string dir = rapforge::testing::scratch_dir("ckpt");
  SegVictim victim = rapforge::testing::tiny_seg_victim(81, false, 3, 4);
  victim.trained_epochs = 9;
  victim.dice_final = 0.125;
  victim.trained_h = 16;
  victim.trained_w = 24;
  const std::string path = dir + "/v.ckpt";
  save_victim(victim, path);

  auto loaded = load_victim(path);
  CHECK(loaded->architecture() == "noskip");
  CHECK(loaded->k() == 3);
  CHECK(loaded->trained_epochs == 9);
  CHECK(loaded->parameter_hash() == victim.parameter_hash());

  // Identical outputs after reload.
  const Scene s = rapforge::testing::random_scene(16, 24, 82);
  CHECK(loaded->predict(s).probs.v == victim.predict(s).probs.v);

  // Sidecar exists and carries the schema fields.
  std::ifstream side(path + ".json");
  REQUIRE(side.good());
  std::string text((std::istreambuf_iterator<char>(side)),
                   std::istreambuf_iterator<char>());
  for (const char* key :
       {"architecture", "encoder", "K", "input_dims", "epochs", "dice_final"})
    CHECK(text.find(key) != std::string::npos);
}
