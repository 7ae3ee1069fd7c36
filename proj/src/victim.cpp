#include "rapforge/victim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace rapforge {

using json = nlohmann::ordered_json;

Encoder make_encoder(int width, uint64_t seed) {
  Encoder e;
  e.width = width;
  e.tag = "e" + std::to_string(width);
  Rng rng(seed);
  e.ec0.init(3, 3, 3, width, rng);
  e.ec1.init(3, 3, width, 2 * width, rng);
  e.ec2.init(3, 3, 2 * width, 2 * width, rng);
  e.ec3.init(3, 3, 2 * width, 4 * width, rng);
  return e;
}

uint64_t weights_hash(const std::vector<const Param*>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param* p : params)
    for (double d : p->w) {
      uint64_t bits;
      std::memcpy(&bits, &d, sizeof(bits));
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

// ---------------------------------------------------------------------------
// SegNet
// ---------------------------------------------------------------------------

SegNet::SegNet(bool skip, const Encoder& enc, int k, uint64_t seed)
    : skip_(skip), width_(enc.width), k_(k) {
  ec0_ = enc.ec0;
  ec1_ = enc.ec1;
  ec2_ = enc.ec2;
  ec3_ = enc.ec3;
  const int f = width_;
  Rng rng(seed ^ 0x5e9f00d5ULL);
  dcb_.init(3, 3, 4 * f, 4 * f, rng);
  ctx1_.init(4 * f, 4 * f, rng);
  ctx2_.init(4 * f, 4 * f, rng);
  dc2_.init(3, 3, skip_ ? 4 * f + 2 * f : 4 * f, 2 * f, rng);
  dc1_.init(3, 3, skip_ ? 2 * f + 2 * f : 2 * f, 2 * f, rng);
  dc0_.init(3, 3, skip_ ? 2 * f + f : 2 * f, f, rng);
  head_.init(1, 1, f, k, rng);
}

namespace {

Array3 concat_channels(const Array3& a, const Array3& b) {
  Array3 out(a.h, a.w, a.c + b.c);
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      const double* pa = a.row(y, x);
      const double* pb = b.row(y, x);
      double* po = out.row(y, x);
      std::memcpy(po, pa, sizeof(double) * a.c);
      std::memcpy(po + a.c, pb, sizeof(double) * b.c);
    }
  return out;
}

void split_channels(const Array3& d, int c_first, Array3* da, Array3* db) {
  *da = Array3(d.h, d.w, c_first);
  *db = Array3(d.h, d.w, d.c - c_first);
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) {
      const double* pd = d.row(y, x);
      std::memcpy(da->row(y, x), pd, sizeof(double) * c_first);
      std::memcpy(db->row(y, x), pd + c_first, sizeof(double) * (d.c - c_first));
    }
}

void add_into(Array3& dst, const Array3& src) {
  for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

}  // namespace

Array3 SegNet::forward(const Array3& pixels) {
  if (pixels.h % 8 != 0 || pixels.w % 8 != 0)
    throw ShapeError("SegNet: input dims must be divisible by 8");
  if (pixels.c != 3) throw ShapeError("SegNet: expected 3 input channels");

  a0_ = s0_.forward(ec0_.forward(pixels));
  a1_ = s1_.forward(ec1_.forward(pool0_.forward(a0_)));
  a2_ = s2_.forward(ec2_.forward(pool1_.forward(a1_)));
  const Array3 a3 = s3_.forward(ec3_.forward(pool2_.forward(a2_)));

  Array3 b = sb_.forward(dcb_.forward(a3));

  // Global-context block: pooled bottleneck features pass through a small
  // MLP and are broadcast back, giving every cell a view of the whole image.
  std::vector<double> g = gap_.forward(b);
  std::vector<double> c1 = ctx1_.forward(g);
  ctx_pre_ = c1;
  for (double& x : c1) x = silu(x);
  const std::vector<double> c2 = ctx2_.forward(c1);
  Array3 b_ctx(b.h, b.w, b.c);
  for (int y = 0; y < b.h; ++y)
    for (int x = 0; x < b.w; ++x) {
      const double* pb = b.row(y, x);
      double* po = b_ctx.row(y, x);
      for (int c = 0; c < b.c; ++c) po[c] = pb[c] + c2[c];
    }
  const Array3 bb = sbb_.forward(b_ctx);

  Array3 t2 = up2_.forward(bb);
  if (skip_) t2 = concat_channels(t2, a2_);
  const Array3 d2 = sd2_.forward(dc2_.forward(t2));

  Array3 t1 = up1_.forward(d2);
  if (skip_) t1 = concat_channels(t1, a1_);
  const Array3 d1 = sd1_.forward(dc1_.forward(t1));

  Array3 t0 = up0_.forward(d1);
  if (skip_) t0 = concat_channels(t0, a0_);
  const Array3 d0 = sd0_.forward(dc0_.forward(t0));

  return out_.forward(head_.forward(d0));
}

Array3 SegNet::backward(const Array3& dprobs, GradMode mode) {
  const bool dec = mode != GradMode::InputOnly;
  const bool enc = mode == GradMode::All;
  const int f = width_;

  Array3 d = out_.backward(dprobs);
  d = head_.backward(d, dec);
  d = sd0_.backward(d);
  d = dc0_.backward(d, dec);

  Array3 da0_skip, da1_skip, da2_skip;
  if (skip_) {
    Array3 dup;
    split_channels(d, 2 * f, &dup, &da0_skip);
    d = up0_.backward(dup);
  } else {
    d = up0_.backward(d);
  }
  d = sd1_.backward(d);
  d = dc1_.backward(d, dec);
  if (skip_) {
    Array3 dup;
    split_channels(d, 2 * f, &dup, &da1_skip);
    d = up1_.backward(dup);
  } else {
    d = up1_.backward(d);
  }
  d = sd2_.backward(d);
  d = dc2_.backward(d, dec);
  if (skip_) {
    Array3 dup;
    split_channels(d, 4 * f, &dup, &da2_skip);
    d = up2_.backward(dup);
  } else {
    d = up2_.backward(d);
  }

  // Context block backward.
  d = sbb_.backward(d);
  std::vector<double> dc2v(4 * f, 0.0);
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) {
      const double* pd = d.row(y, x);
      for (int c = 0; c < d.c; ++c) dc2v[c] += pd[c];
    }
  std::vector<double> dc1v = ctx2_.backward(dc2v, dec);
  for (int i = 0; i < 4 * f; ++i) dc1v[i] *= silu_grad(ctx_pre_[i]);
  const std::vector<double> dgv = ctx1_.backward(dc1v, dec);
  add_into(d, gap_.backward(dgv));

  d = sb_.backward(d);
  d = dcb_.backward(d, dec);

  // Encoder chain with skip contributions folded in.
  d = s3_.backward(d);
  d = ec3_.backward(d, enc);
  d = pool2_.backward(d);
  if (skip_) add_into(d, da2_skip);
  d = s2_.backward(d);
  d = ec2_.backward(d, enc);
  d = pool1_.backward(d);
  if (skip_) add_into(d, da1_skip);
  d = s1_.backward(d);
  d = ec1_.backward(d, enc);
  d = pool0_.backward(d);
  if (skip_) add_into(d, da0_skip);
  d = s0_.backward(d);
  return ec0_.backward(d, enc);
}

std::vector<Param*> SegNet::encoder_params() {
  return {&ec0_.weight, &ec0_.bias, &ec1_.weight, &ec1_.bias,
          &ec2_.weight, &ec2_.bias, &ec3_.weight, &ec3_.bias};
}

std::vector<Param*> SegNet::decoder_params() {
  return {&dcb_.weight,  &dcb_.bias,  &ctx1_.weight, &ctx1_.bias,
          &ctx2_.weight, &ctx2_.bias, &dc2_.weight,  &dc2_.bias,
          &dc1_.weight,  &dc1_.bias,  &dc0_.weight,  &dc0_.bias,
          &head_.weight, &head_.bias};
}

std::vector<Param*> SegNet::all_params() {
  auto a = encoder_params();
  const auto b = decoder_params();
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---------------------------------------------------------------------------
// EncoderClassifier
// ---------------------------------------------------------------------------

EncoderClassifier::EncoderClassifier(const Encoder& enc, int k, uint64_t seed)
    : width_(enc.width), k_(k), tag_(enc.tag) {
  ec0_ = enc.ec0;
  ec1_ = enc.ec1;
  ec2_ = enc.ec2;
  ec3_ = enc.ec3;
  Rng rng(seed ^ 0xc1a55ULL);
  fc_.init(4 * width_, k, rng);
}

std::vector<double> EncoderClassifier::forward(const Array3& pixels) {
  if (pixels.h % 8 != 0 || pixels.w % 8 != 0)
    throw ShapeError("EncoderClassifier: input dims must be divisible by 8");
  const Array3 a0 = s0_.forward(ec0_.forward(pixels));
  const Array3 a1 = s1_.forward(ec1_.forward(pool0_.forward(a0)));
  const Array3 a2 = s2_.forward(ec2_.forward(pool1_.forward(a1)));
  const Array3 a3 = s3_.forward(ec3_.forward(pool2_.forward(a2)));
  return fc_.forward(gap_.forward(a3));
}

void EncoderClassifier::backward(const std::vector<double>& dlogits) {
  Array3 d = gap_.backward(fc_.backward(dlogits, true));
  d = s3_.backward(d);
  d = ec3_.backward(d, true);
  d = pool2_.backward(d);
  d = s2_.backward(d);
  d = ec2_.backward(d, true);
  d = pool1_.backward(d);
  d = s1_.backward(d);
  d = ec1_.backward(d, true);
  d = pool0_.backward(d);
  d = s0_.backward(d);
  ec0_.backward(d, true);
}

std::vector<Param*> EncoderClassifier::params() {
  return {&ec0_.weight, &ec0_.bias, &ec1_.weight, &ec1_.bias, &ec2_.weight,
          &ec2_.bias,   &ec3_.weight, &ec3_.bias, &fc_.weight, &fc_.bias};
}

Encoder EncoderClassifier::release_encoder() const {
  Encoder e;
  e.width = width_;
  e.tag = tag_;
  e.ec0 = ec0_;
  e.ec1 = ec1_;
  e.ec2 = ec2_;
  e.ec3 = ec3_;
  return e;
}

// ---------------------------------------------------------------------------
// GridDetector
// ---------------------------------------------------------------------------

GridDetector::GridDetector(int width, int k, uint64_t seed) : width_(width), k_(k) {
  Rng rng(seed ^ 0xde7ec7ULL);
  const int f = width;
  c0_.init(3, 3, 3, f, rng);
  c1_.init(3, 3, f, 2 * f, rng);
  c2_.init(3, 3, 2 * f, 2 * f, rng);
  c3_.init(3, 3, 2 * f, 4 * f, rng);
  trunk_.init(3, 3, 4 * f, 4 * f, rng);
  ctx1_.init(4 * f, 4 * f, rng);
  ctx2_.init(4 * f, 4 * f, rng);
  head_obj_.init(1, 1, 4 * f, 1, rng);
  head_cls_.init(1, 1, 4 * f, k, rng);
  head_box_.init(1, 1, 4 * f, 4, rng);
}

DetectionMaps GridDetector::forward(const Array3& pixels) {
  if (pixels.h % kCell != 0 || pixels.w % kCell != 0)
    throw ShapeError("GridDetector: input dims must be divisible by the 16 px cell");
  const Array3 a0 = p0_.forward(s0_.forward(c0_.forward(pixels)));
  const Array3 a1 = p1_.forward(s1_.forward(c1_.forward(a0)));
  const Array3 a2 = p2_.forward(s2_.forward(c2_.forward(a1)));
  const Array3 a3 = p3_.forward(s3_.forward(c3_.forward(a2)));
  const Array3 t = st_.forward(trunk_.forward(a3));

  std::vector<double> g = gap_.forward(t);
  std::vector<double> c1 = ctx1_.forward(g);
  ctx_pre_ = c1;
  for (double& x : c1) x = silu(x);
  const std::vector<double> c2 = ctx2_.forward(c1);
  Array3 t_ctx(t.h, t.w, t.c);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x) {
      const double* pt = t.row(y, x);
      double* po = t_ctx.row(y, x);
      for (int c = 0; c < t.c; ++c) po[c] = pt[c] + c2[c];
    }
  const Array3 bb = sbb_.forward(t_ctx);

  DetectionMaps maps;
  maps.objectness = sig_obj_.forward(head_obj_.forward(bb));
  maps.class_probs = sig_cls_.forward(head_cls_.forward(bb));
  maps.boxes = sig_box_.forward(head_box_.forward(bb));
  return maps;
}

Array3 GridDetector::backward(const Array3& dobj, const Array3& dcls,
                              const Array3& dbox, GradMode mode) {
  const bool train = mode != GradMode::InputOnly;
  Array3 d = head_obj_.backward(sig_obj_.backward(dobj), train);
  add_into(d, head_cls_.backward(sig_cls_.backward(dcls), train));
  add_into(d, head_box_.backward(sig_box_.backward(dbox), train));

  d = sbb_.backward(d);
  std::vector<double> dc2v(4 * width_, 0.0);
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) {
      const double* pd = d.row(y, x);
      for (int c = 0; c < d.c; ++c) dc2v[c] += pd[c];
    }
  std::vector<double> dc1v = ctx2_.backward(dc2v, train);
  for (int i = 0; i < 4 * width_; ++i) dc1v[i] *= silu_grad(ctx_pre_[i]);
  const std::vector<double> dgv = ctx1_.backward(dc1v, train);
  add_into(d, gap_.backward(dgv));

  d = st_.backward(d);
  d = trunk_.backward(d, train);
  d = p3_.backward(d);
  d = s3_.backward(d);
  d = c3_.backward(d, train);
  d = p2_.backward(d);
  d = s2_.backward(d);
  d = c2_.backward(d, train);
  d = p1_.backward(d);
  d = s1_.backward(d);
  d = c1_.backward(d, train);
  d = p0_.backward(d);
  d = s0_.backward(d);
  return c0_.backward(d, train);
}

std::vector<Param*> GridDetector::params() {
  return {&c0_.weight,       &c0_.bias,       &c1_.weight,       &c1_.bias,
          &c2_.weight,       &c2_.bias,       &c3_.weight,       &c3_.bias,
          &trunk_.weight,    &trunk_.bias,    &ctx1_.weight,     &ctx1_.bias,
          &ctx2_.weight,     &ctx2_.bias,     &head_obj_.weight, &head_obj_.bias,
          &head_cls_.weight, &head_cls_.bias, &head_box_.weight, &head_box_.bias};
}

// ---------------------------------------------------------------------------
// VictimModel wrappers
// ---------------------------------------------------------------------------

namespace {
std::vector<const Param*> as_const(std::vector<Param*> ps) {
  return {ps.begin(), ps.end()};
}
}  // namespace

ProbMap SegVictim::predict(const Scene& s) {
  ProbMap out;
  out.probs = net_.forward(s.pixels);
  return out;
}

Array3 SegVictim::input_gradient(const Array3& dprobs) {
  return net_.backward(dprobs, GradMode::InputOnly);
}

uint64_t SegVictim::parameter_hash() const {
  return weights_hash(as_const(const_cast<SegNet&>(net_).all_params()));
}

ProbMap DetectVictim::predict(const Scene& s) {
  last_ = det_.forward(s.pixels);
  ProbMap out;
  out.probs = detection_attack_surface(last_, -1);
  return out;
}

Array3 DetectVictim::input_gradient(const Array3& dprobs) {
  const Array3& obj = last_.objectness;
  const Array3& cls = last_.class_probs;
  Array3 dobj(obj.h, obj.w, 1), dcls(cls.h, cls.w, cls.c),
      dbox(obj.h, obj.w, 4);
  for (int y = 0; y < obj.h; ++y)
    for (int x = 0; x < obj.w; ++x) {
      const double o = obj.at(y, x, 0);
      double acc = 0.0;
      for (int c = 0; c < cls.c; ++c) {
        const double g = dprobs.at(y, x, c);
        acc += g * cls.at(y, x, c);
        dcls.at(y, x, c) = g * o;
      }
      dobj.at(y, x, 0) = acc;
    }
  return det_.backward(dobj, dcls, dbox, GradMode::InputOnly);
}

uint64_t DetectVictim::parameter_hash() const {
  return weights_hash(as_const(const_cast<GridDetector&>(det_).params()));
}

DetectionMaps detect_grid(DetectVictim& model, const Scene& s) {
  return model.detector().forward(s.pixels);
}

Array3 detection_attack_surface(const DetectionMaps& maps, int class_index) {
  const Array3& obj = maps.objectness;
  const Array3& cls = maps.class_probs;
  if (obj.h != cls.h || obj.w != cls.w)
    throw ShapeError("detection_attack_surface: map dims disagree");
  if (class_index >= cls.c)
    throw ParameterError("detection_attack_surface: class index out of range");
  if (class_index >= 0) {
    Array3 out(obj.h, obj.w, 1);
    for (int y = 0; y < obj.h; ++y)
      for (int x = 0; x < obj.w; ++x)
        out.at(y, x, 0) = obj.at(y, x, 0) * cls.at(y, x, class_index);
    return out;
  }
  // All channels at once.
  Array3 out(cls.h, cls.w, cls.c);
  for (int y = 0; y < cls.h; ++y)
    for (int x = 0; x < cls.w; ++x) {
      const double o = obj.at(y, x, 0);
      for (int c = 0; c < cls.c; ++c) out.at(y, x, c) = o * cls.at(y, x, c);
    }
  return out;
}

ProbMap predict(VictimModel& model, const Scene& s) {
  ProbMap out = model.predict(s);
  const auto [oh, ow] = model.output_dims(s.pixels.h, s.pixels.w);
  out.probs.require_shape(oh, ow, model.k(), "predict");
  return out;
}

double dice_loss(const Array3& pred, const Array3& target, Array3* dpred,
                 double eps) {
  if (!pred.same_shape(target)) throw ShapeError("dice_loss: shape mismatch");
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    sxy += pred.v[i] * target.v[i];
    sxx += pred.v[i] * pred.v[i];
    syy += target.v[i] * target.v[i];
  }
  const double num = 2.0 * sxy + eps;
  const double den = sxx + syy + eps;
  if (dpred) {
    *dpred = Array3(pred.h, pred.w, pred.c);
    for (size_t i = 0; i < pred.v.size(); ++i)
      dpred->v[i] = (2.0 * num * pred.v[i] - 2.0 * den * target.v[i]) / (den * den);
  }
  return 1.0 - num / den;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

// Per-class Dice over a one-hot label map, averaged across classes.
double multiclass_dice(const Array3& pred, const Array2i& labels, Array3* dpred,
                       double eps = 1e-6) {
  const int k = pred.c;
  std::vector<double> sxy(k, 0.0), sxx(k, 0.0), syy(k, 0.0);
  for (int y = 0; y < pred.h; ++y)
    for (int x = 0; x < pred.w; ++x) {
      const double* p = pred.row(y, x);
      const int lab = labels.at(y, x);
      for (int c = 0; c < k; ++c) {
        sxy[c] += p[c] * (c == lab ? 1.0 : 0.0);
        sxx[c] += p[c] * p[c];
        syy[c] += (c == lab ? 1.0 : 0.0);
      }
    }
  double loss = 0.0;
  std::vector<double> num(k), den(k);
  for (int c = 0; c < k; ++c) {
    num[c] = 2.0 * sxy[c] + eps;
    den[c] = sxx[c] + syy[c] + eps;
    loss += 1.0 - num[c] / den[c];
  }
  if (dpred) {
    *dpred = Array3(pred.h, pred.w, k);
    for (int y = 0; y < pred.h; ++y)
      for (int x = 0; x < pred.w; ++x) {
        const double* p = pred.row(y, x);
        double* d = dpred->row(y, x);
        const int lab = labels.at(y, x);
        for (int c = 0; c < k; ++c) {
          const double t = (c == lab ? 1.0 : 0.0);
          d[c] = (2.0 * num[c] * p[c] - 2.0 * den[c] * t) / (den[c] * den[c] * k);
        }
      }
  }
  return loss / k;
}

void require_labels(const DatasetSplit& data, const char* who) {
  if (data.scenes.empty()) throw ConfigurationError(std::string(who) + ": empty dataset");
  for (const auto& s : data.scenes)
    if (!s.labels) throw ConfigurationError(std::string(who) + ": scene '" + s.id +
                                            "' lacks labels");
}

std::vector<int> shuffled_indices(size_t n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
  return idx;
}

}  // namespace

Encoder train_encoder_classifier(const DatasetSplit& data, int epochs,
                                 const TrainConfig& cfg, int width,
                                 TrainReport* report) {
  require_labels(data, "train_encoder_classifier");
  const int k = data.k();
  if (k < 2) throw ConfigurationError("train_encoder_classifier: K must be >= 2");

  std::vector<int> image_labels;
  image_labels.reserve(data.scenes.size());
  for (const auto& s : data.scenes) image_labels.push_back(derive_image_label(s, k));

  EncoderClassifier clf(make_encoder(width, cfg.seed), k, cfg.seed);
  if (epochs == 0) {
    std::fprintf(stderr,
                 "warning: epochs=0, returning encoder with initialization weights\n");
    return clf.release_encoder();
  }

  const int distinct = static_cast<int>(
      std::set<int>(image_labels.begin(), image_labels.end()).size());
  if (distinct < 2)
    throw ConfigurationError("train_encoder_classifier: single-class data");

  auto params = clf.params();
  std::vector<AdamState> opt(params.size());
  Rng rng = Rng(cfg.seed).split("phase1");

  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled_indices(data.scenes.size(), rng);
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      for (auto* p : params) p->zero_grad();
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (size_t i = start; i < end; ++i) {
        const int idx = order[i];
        const auto logits = clf.forward(data.scenes[idx].pixels);
        std::vector<double> dlogits;
        epoch_loss += softmax_cross_entropy(logits, image_labels[idx], &dlogits);
        for (double& d : dlogits) d *= inv_b;
        clf.backward(dlogits);
        ++seen;
      }
      for (size_t p = 0; p < params.size(); ++p)
        adam_step(params[p]->w, params[p]->g, opt[p], cfg.lr);
    }
    if (report) report->epoch_loss.push_back(epoch_loss / std::max<size_t>(1, seen));
  }

  if (report) {
    int correct = 0;
    for (size_t i = 0; i < data.scenes.size(); ++i) {
      const auto logits = clf.forward(data.scenes[i].pixels);
      const int pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                                        logits.begin());
      if (pred == image_labels[i]) ++correct;
    }
    report->final_metric = static_cast<double>(correct) / data.scenes.size();
  }
  return clf.release_encoder();
}

std::unique_ptr<VictimModel> train_segmenter(const Encoder& encoder, bool skip,
                                             const DatasetSplit& data, int epochs,
                                             const TrainConfig& cfg,
                                             TrainReport* report) {
  require_labels(data, "train_segmenter");
  const int k = data.k();
  if (data.height() % 8 != 0 || data.width() % 8 != 0)
    throw ShapeError("train_segmenter: dataset dims must be divisible by 8");

  SegNet net(skip, encoder, k, cfg.seed);
  auto dec_params = net.decoder_params();
  std::vector<AdamState> opt(dec_params.size());
  Rng rng = Rng(cfg.seed).split("phase2");

  const int workers = std::max(1, worker_count());
  std::vector<SegNet> clones(workers, net);

  double last_epoch_loss = 0.0;
  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled_indices(data.scenes.size(), rng);
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      const int b = static_cast<int>(end - start);

      // Broadcast current weights to the worker clones.
      for (auto& c : clones) {
        auto dst = c.decoder_params();
        for (size_t p = 0; p < dec_params.size(); ++p) dst[p]->w = dec_params[p]->w;
      }

      // Per-item gradient buffers keep the reduction order fixed, so
      // results do not depend on the worker count.
      std::vector<std::vector<std::vector<double>>> item_grads(
          b, std::vector<std::vector<double>>(dec_params.size()));
      std::vector<double> item_loss(b, 0.0);
      parallel_for(b, [&](int w, int i) {
        SegNet& c = clones[w];
        auto ps = c.decoder_params();
        for (auto* p : ps) p->zero_grad();
        const Scene& s = data.scenes[order[start + i]];
        const Array3 probs = c.forward(s.pixels);
        Array3 dprobs;
        item_loss[i] = multiclass_dice(probs, *s.labels, &dprobs);
        c.backward(dprobs, GradMode::DecoderOnly);
        for (size_t p = 0; p < ps.size(); ++p) item_grads[i][p] = ps[p]->g;
      });

      for (auto* p : dec_params) p->zero_grad();
      for (int i = 0; i < b; ++i) {
        epoch_loss += item_loss[i];
        ++seen;
        for (size_t p = 0; p < dec_params.size(); ++p)
          for (size_t j = 0; j < dec_params[p]->g.size(); ++j)
            dec_params[p]->g[j] += item_grads[i][p][j] / b;
      }
      for (size_t p = 0; p < dec_params.size(); ++p)
        adam_step(dec_params[p]->w, dec_params[p]->g, opt[p], cfg.lr);
    }
    last_epoch_loss = epoch_loss / std::max<size_t>(1, seen);
    if (report) report->epoch_loss.push_back(last_epoch_loss);
  }

  if (report) report->final_metric = last_epoch_loss;
  auto victim = std::make_unique<SegVictim>(std::move(net), encoder.tag);
  victim->trained_epochs = epochs;
  victim->dice_final = last_epoch_loss;
  victim->trained_h = data.height();
  victim->trained_w = data.width();
  return victim;
}

std::unique_ptr<VictimModel> train_detector(const DatasetSplit& data, int epochs,
                                            const TrainConfig& cfg, int width,
                                            TrainReport* report) {
  require_labels(data, "train_detector");
  const int k = data.k();
  const int h = data.height(), w = data.width();
  if (h % GridDetector::kCell != 0 || w % GridDetector::kCell != 0)
    throw ShapeError("train_detector: dataset dims must be divisible by 16");
  const int gh = h / GridDetector::kCell, gw = w / GridDetector::kCell;

  // Cell-level targets: the cell holding a class's centroid is responsible
  // for it; boxes are the class's bounding box, normalized.
  struct CellTargets {
    Array3 obj, cls, box;
    Array2i responsible;
  };
  std::vector<CellTargets> targets(data.scenes.size());
  for (size_t i = 0; i < data.scenes.size(); ++i) {
    const Scene& s = data.scenes[i];
    CellTargets& t = targets[i];
    t.obj = Array3(gh, gw, 1);
    t.cls = Array3(gh, gw, k);
    t.box = Array3(gh, gw, 4);
    t.responsible = Array2i(gh, gw, 0);
    for (int c = 1; c < k; ++c) {
      long cy = 0, cx = 0, n = 0;
      int ymin = h, ymax = -1, xmin = w, xmax = -1;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (s.labels->at(y, x) == c) {
            cy += y;
            cx += x;
            ++n;
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
          }
      if (n == 0) continue;
      const int py = static_cast<int>(cy / n), px = static_cast<int>(cx / n);
      const int gy = py / GridDetector::kCell, gx = px / GridDetector::kCell;
      t.obj.at(gy, gx, 0) = 1.0;
      t.cls.at(gy, gx, c) = 1.0;
      t.responsible.at(gy, gx) = 1;
      t.box.at(gy, gx, 0) = static_cast<double>(py % GridDetector::kCell) / GridDetector::kCell;
      t.box.at(gy, gx, 1) = static_cast<double>(px % GridDetector::kCell) / GridDetector::kCell;
      t.box.at(gy, gx, 2) = static_cast<double>(ymax - ymin + 1) / h;
      t.box.at(gy, gx, 3) = static_cast<double>(xmax - xmin + 1) / w;
    }
  }

  GridDetector det(width, k, cfg.seed);
  auto params = det.params();
  std::vector<AdamState> opt(params.size());
  Rng rng = Rng(cfg.seed).split("detector");

  // BCE with negatives weighted up, so empty cells sit well below the 0.5
  // decision line after training.
  const double neg_weight = 2.0;
  const double clamp_eps = 1e-7;
  double last_epoch_loss = 0.0;

  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled_indices(data.scenes.size(), rng);
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      for (auto* p : params) p->zero_grad();
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (size_t i = start; i < end; ++i) {
        const int idx = order[i];
        const Scene& s = data.scenes[idx];
        const CellTargets& t = targets[idx];
        const DetectionMaps maps = det.forward(s.pixels);

        Array3 dobj(gh, gw, 1), dcls(gh, gw, k), dbox(gh, gw, 4);
        double loss = 0.0;
        const double inv_cells = 1.0 / (gh * gw);
        for (int y = 0; y < gh; ++y)
          for (int x = 0; x < gw; ++x) {
            const double yv = std::clamp(maps.objectness.at(y, x, 0), clamp_eps,
                                         1.0 - clamp_eps);
            const double tv = t.obj.at(y, x, 0);
            const double wgt = tv > 0.5 ? 1.0 : neg_weight;
            loss += -wgt * (tv * std::log(yv) + (1 - tv) * std::log(1 - yv)) * inv_cells;
            dobj.at(y, x, 0) = wgt * (yv - tv) / (yv * (1 - yv)) * inv_cells;
            if (t.responsible.at(y, x)) {
              for (int c = 0; c < k; ++c) {
                const double pc = std::clamp(maps.class_probs.at(y, x, c), clamp_eps,
                                             1.0 - clamp_eps);
                const double tc = t.cls.at(y, x, c);
                loss += -(tc * std::log(pc) + (1 - tc) * std::log(1 - pc)) / k;
                dcls.at(y, x, c) = (pc - tc) / (pc * (1 - pc)) / k;
              }
              for (int c = 0; c < 4; ++c) {
                const double diff = maps.boxes.at(y, x, c) - t.box.at(y, x, c);
                loss += 0.5 * diff * diff;
                dbox.at(y, x, c) = diff;
              }
            }
          }
        for (double& v : dobj.v) v *= inv_b;
        for (double& v : dcls.v) v *= inv_b;
        for (double& v : dbox.v) v *= inv_b;
        det.backward(dobj, dcls, dbox, GradMode::All);
        epoch_loss += loss;
        ++seen;
      }
      for (size_t p = 0; p < params.size(); ++p)
        adam_step(params[p]->w, params[p]->g, opt[p], cfg.lr);
    }
    last_epoch_loss = epoch_loss / std::max<size_t>(1, seen);
    if (report) report->epoch_loss.push_back(last_epoch_loss);
  }

  if (report) report->final_metric = last_epoch_loss;
  auto victim = std::make_unique<DetectVictim>(std::move(det), "d" + std::to_string(width));
  victim->trained_epochs = epochs;
  victim->dice_final = last_epoch_loss;
  victim->trained_h = h;
  victim->trained_w = w;
  return victim;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kCkptMagic = 0x52415046; // "RAPF"

void write_string(std::ofstream& out, const std::string& s) {
  const uint32_t n = static_cast<uint32_t>(s.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(s.data(), n);
}

std::string read_string(std::ifstream& in) {
  uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n > (1u << 20)) throw FormatError("checkpoint: bad string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_params(std::ofstream& out, const std::vector<Param*>& params) {
  write_pod<uint64_t>(out, params.size());
  for (const Param* p : params) {
    write_pod<uint64_t>(out, p->w.size());
    out.write(reinterpret_cast<const char*>(p->w.data()),
              static_cast<std::streamsize>(p->w.size() * sizeof(double)));
  }
}

void read_params(std::ifstream& in, const std::vector<Param*>& params) {
  const auto n = read_pod<uint64_t>(in);
  if (n != params.size()) throw FormatError("checkpoint: parameter count mismatch");
  for (Param* p : params) {
    const auto sz = read_pod<uint64_t>(in);
    if (sz != p->w.size()) throw FormatError("checkpoint: parameter size mismatch");
    in.read(reinterpret_cast<char*>(p->w.data()),
            static_cast<std::streamsize>(sz * sizeof(double)));
  }
  if (!in) throw FormatError("checkpoint: truncated weights");
}

}  // namespace

void save_victim(const VictimModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_pod<uint32_t>(out, kCkptMagic);
  write_pod<uint32_t>(out, 1);
  write_string(out, model.architecture());
  write_string(out, model.encoder_tag());
  write_pod<int32_t>(out, model.k());
  write_pod<int32_t>(out, model.trained_h);
  write_pod<int32_t>(out, model.trained_w);
  write_pod<int32_t>(out, model.trained_epochs);
  write_pod<double>(out, model.dice_final);

  if (const auto* seg = dynamic_cast<const SegVictim*>(&model)) {
    auto& net = const_cast<SegNet&>(seg->net());
    write_pod<int32_t>(out, net.width());
    write_params(out, net.all_params());
  } else if (const auto* det = dynamic_cast<const DetectVictim*>(&model)) {
    auto& d = const_cast<DetectVictim&>(*det).detector();
    write_pod<int32_t>(out, d.width());
    write_params(out, d.params());
  } else {
    throw CapabilityError("save_victim: unknown model kind");
  }
  if (!out) throw IoError("short write to " + path);
  out.close();

  json j;
  j["architecture"] = model.architecture();
  j["encoder"] = model.encoder_tag();
  j["K"] = model.k();
  j["input_dims"] = {model.trained_h, model.trained_w};
  j["epochs"] = model.trained_epochs;
  j["dice_final"] = model.dice_final;
  std::ofstream side(path + ".json", std::ios::trunc);
  if (!side) throw IoError("cannot write sidecar for " + path);
  side << j.dump(2) << "\n";
}

std::unique_ptr<VictimModel> load_victim(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  if (read_pod<uint32_t>(in) != kCkptMagic)
    throw FormatError(path + ": not a victim checkpoint");
  if (read_pod<uint32_t>(in) != 1) throw FormatError(path + ": unknown version");
  const std::string arch = read_string(in);
  const std::string enc_tag = read_string(in);
  const int k = read_pod<int32_t>(in);
  const int th = read_pod<int32_t>(in);
  const int tw = read_pod<int32_t>(in);
  const int epochs = read_pod<int32_t>(in);
  const double dice_final = read_pod<double>(in);
  const int width = read_pod<int32_t>(in);

  std::unique_ptr<VictimModel> model;
  if (arch == "skip" || arch == "noskip") {
    SegNet net(arch == "skip", make_encoder(width, 0), k, 0);
    read_params(in, net.all_params());
    model = std::make_unique<SegVictim>(std::move(net), enc_tag);
  } else if (arch == "detect") {
    GridDetector det(width, k, 0);
    read_params(in, det.params());
    model = std::make_unique<DetectVictim>(std::move(det), enc_tag);
  } else {
    throw FormatError(path + ": unknown architecture '" + arch + "'");
  }
  model->trained_epochs = epochs;
  model->dice_final = dice_final;
  model->trained_h = th;
  model->trained_w = tw;
  return model;
}

}  // namespace rapforge
