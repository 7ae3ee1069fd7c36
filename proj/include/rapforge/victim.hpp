#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rapforge/data.hpp"
#include "rapforge/domain.hpp"
#include "rapforge/nn.hpp"

namespace rapforge {

// Which parameters receive gradients during a backward pass.
enum class GradMode { InputOnly, DecoderOnly, All };

// ---------------------------------------------------------------------------
// Encoder: the convolutional front trained as an image classifier in phase
// one, then locked. Three 2x downsamplings; inputs must be divisible by 8.
// ---------------------------------------------------------------------------

struct Encoder {
  int width = 8; // base channel count
  std::string tag = "e8";
  Conv2d ec0, ec1, ec2, ec3;

  std::vector<Param*> params() { return {&ec0.weight, &ec0.bias, &ec1.weight, &ec1.bias,
                                         &ec2.weight, &ec2.bias, &ec3.weight, &ec3.bias}; }
  std::vector<const Param*> params() const {
    auto* self = const_cast<Encoder*>(this);
    std::vector<const Param*> out;
    for (auto* p : self->params()) out.push_back(p);
    return out;
  }
};

Encoder make_encoder(int width, uint64_t seed);

// FNV-1a over the raw bytes of a parameter list; used to verify freezing.
uint64_t weights_hash(const std::vector<const Param*>& params);

// ---------------------------------------------------------------------------
// Segmentation net: U-shaped decoder on top of a (possibly frozen) encoder,
// with an optional skip pathway and a global-context block in the bottleneck
// so every output pixel can draw on features from the whole image.
// ---------------------------------------------------------------------------

class SegNet {
public:
  SegNet() = default;
  SegNet(bool skip, const Encoder& enc, int k, uint64_t seed);

  // pixels (H,W,3) -> per-pixel class confidences (H,W,K).
  Array3 forward(const Array3& pixels);
  // dprobs -> dpixels; accumulates parameter grads per mode.
  Array3 backward(const Array3& dprobs, GradMode mode);

  std::vector<Param*> encoder_params();
  std::vector<Param*> decoder_params();
  std::vector<Param*> all_params();

  bool skip() const { return skip_; }
  int k() const { return k_; }
  int width() const { return width_; }

private:
  bool skip_ = true;
  int width_ = 8, k_ = 4;

  Conv2d ec0_, ec1_, ec2_, ec3_;
  AvgPool2 pool0_, pool1_, pool2_;
  SiLU s0_, s1_, s2_, s3_;

  Conv2d dcb_, dc2_, dc1_, dc0_, head_;
  SiLU sb_, sbb_, sd2_, sd1_, sd0_;
  GlobalAvgPool gap_;
  Dense ctx1_, ctx2_;
  std::vector<double> ctx_pre_; // pre-activation cache for the ctx SiLU
  Upsample2 up2_, up1_, up0_;
  SigmoidLayer out_;

  Array3 a0_, a1_, a2_; // skip caches
};

// ---------------------------------------------------------------------------
// Phase-one classifier: encoder + global pooling + dense head. The head is
// discarded once the encoder is trained.
// ---------------------------------------------------------------------------

class EncoderClassifier {
public:
  EncoderClassifier() = default;
  EncoderClassifier(const Encoder& enc, int k, uint64_t seed);

  std::vector<double> forward(const Array3& pixels); // logits, size K
  void backward(const std::vector<double>& dlogits);

  std::vector<Param*> params();
  Encoder release_encoder() const; // drops the dense head

private:
  int width_ = 8, k_ = 4;
  std::string tag_;
  Conv2d ec0_, ec1_, ec2_, ec3_;
  AvgPool2 pool0_, pool1_, pool2_;
  SiLU s0_, s1_, s2_, s3_;
  GlobalAvgPool gap_;
  Dense fc_;
};

// ---------------------------------------------------------------------------
// Toy single-scale grid detector (16 px cells): objectness, class
// probabilities, and boxes per cell.
// ---------------------------------------------------------------------------

struct DetectionMaps {
  Array3 objectness;  // Gh x Gw x 1, in [0,1]
  Array3 class_probs; // Gh x Gw x K, in [0,1]
  Array3 boxes;       // Gh x Gw x 4
};

class GridDetector {
public:
  static constexpr int kCell = 16;

  GridDetector() = default;
  GridDetector(int width, int k, uint64_t seed);

  DetectionMaps forward(const Array3& pixels);
  Array3 backward(const Array3& dobj, const Array3& dcls, const Array3& dbox,
                  GradMode mode);

  std::vector<Param*> params();
  int k() const { return k_; }
  int width() const { return width_; }

private:
  int width_ = 8, k_ = 4;
  Conv2d c0_, c1_, c2_, c3_, trunk_;
  AvgPool2 p0_, p1_, p2_, p3_;
  SiLU s0_, s1_, s2_, s3_, st_, sbb_;
  GlobalAvgPool gap_;
  Dense ctx1_, ctx2_;
  std::vector<double> ctx_pre_;
  Conv2d head_obj_, head_cls_, head_box_;
  SigmoidLayer sig_obj_, sig_cls_, sig_box_;
};

// ---------------------------------------------------------------------------
// VictimModel: the uniform attack surface the forge and evaluation modules
// target. Segmentation victims expose their probability map directly; the
// detection victim exposes objectness (x) class probability on the grid.
// ---------------------------------------------------------------------------

class VictimModel {
public:
  virtual ~VictimModel() = default;

  virtual ProbMap predict(const Scene& s) = 0;
  // Gradient of a scalar w.r.t. input pixels, given its gradient w.r.t. the
  // last predict() output. No parameter gradients are touched.
  virtual Array3 input_gradient(const Array3& dprobs) = 0;

  virtual bool differentiable() const { return true; }
  virtual std::string architecture() const = 0;
  virtual std::string encoder_tag() const = 0;
  virtual int k() const = 0;
  // Output spatial dims for an input of the given size.
  virtual std::pair<int, int> output_dims(int h, int w) const = 0;
  virtual uint64_t parameter_hash() const = 0;
  virtual std::unique_ptr<VictimModel> clone() const = 0;

  // Checkpoint metadata.
  int trained_epochs = 0;
  double dice_final = 0.0;
  int trained_h = 0, trained_w = 0;
};

class SegVictim : public VictimModel {
public:
  SegVictim(SegNet net, std::string encoder_tag)
      : net_(std::move(net)), encoder_tag_(std::move(encoder_tag)) {}

  ProbMap predict(const Scene& s) override;
  Array3 input_gradient(const Array3& dprobs) override;
  std::string architecture() const override { return net_.skip() ? "skip" : "noskip"; }
  std::string encoder_tag() const override { return encoder_tag_; }
  int k() const override { return net_.k(); }
  std::pair<int, int> output_dims(int h, int w) const override { return {h, w}; }
  uint64_t parameter_hash() const override;
  std::unique_ptr<VictimModel> clone() const override {
    return std::make_unique<SegVictim>(*this);
  }

  SegNet& net() { return net_; }
  const SegNet& net() const { return net_; }

private:
  SegNet net_;
  std::string encoder_tag_;
};

class DetectVictim : public VictimModel {
public:
  DetectVictim(GridDetector det, std::string encoder_tag)
      : det_(std::move(det)), encoder_tag_(std::move(encoder_tag)) {}

  // The prediction is the per-cell product objectness * class probability.
  ProbMap predict(const Scene& s) override;
  Array3 input_gradient(const Array3& dprobs) override;
  std::string architecture() const override { return "detect"; }
  std::string encoder_tag() const override { return encoder_tag_; }
  int k() const override { return det_.k(); }
  std::pair<int, int> output_dims(int h, int w) const override {
    return {h / GridDetector::kCell, w / GridDetector::kCell};
  }
  uint64_t parameter_hash() const override;
  std::unique_ptr<VictimModel> clone() const override {
    return std::make_unique<DetectVictim>(*this);
  }

  GridDetector& detector() { return det_; }

private:
  GridDetector det_;
  std::string encoder_tag_;
  DetectionMaps last_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double final_metric = 0.0; // accuracy (classifier) or dice loss (segmenter)
};

// Phase one: encoder as whole-image classifier on majority-foreground
// labels; the dense head is discarded from the returned encoder.
Encoder train_encoder_classifier(const DatasetSplit& data, int epochs,
                                 const TrainConfig& cfg, int width = 8,
                                 TrainReport* report = nullptr);

// Phase two: decoder trained with Dice loss; encoder weights are locked.
std::unique_ptr<VictimModel> train_segmenter(const Encoder& encoder, bool skip,
                                             const DatasetSplit& data, int epochs,
                                             const TrainConfig& cfg,
                                             TrainReport* report = nullptr);

std::unique_ptr<VictimModel> train_detector(const DatasetSplit& data, int epochs,
                                            const TrainConfig& cfg, int width = 8,
                                            TrainReport* report = nullptr);

// Raw grid maps of a detection victim.
DetectionMaps detect_grid(DetectVictim& model, const Scene& s);

// objectness (*) class_probs[..., k]; the y' the detection attack targets.
Array3 detection_attack_surface(const DetectionMaps& maps, int class_index);

// predict with shape checking per the module contract.
ProbMap predict(VictimModel& model, const Scene& s);

// Dice loss 1 - (2 Sxy + eps) / (Sxx + Syy + eps); fills dpred when given.
double dice_loss(const Array3& pred, const Array3& target, Array3* dpred = nullptr,
                 double eps = 1e-6);

// ---------------------------------------------------------------------------
// Checkpoints: binary weights plus a JSON sidecar.
// ---------------------------------------------------------------------------

void save_victim(const VictimModel& model, const std::string& path);
std::unique_ptr<VictimModel> load_victim(const std::string& path);

}  // namespace rapforge
