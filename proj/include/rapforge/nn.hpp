#pragma once

#include <vector>

#include "rapforge/tensor.hpp"

namespace rapforge {

// Trainable parameter block with its gradient accumulator.
struct Param {
  std::vector<double> w;
  std::vector<double> g;

  void resize(size_t n) {
    w.assign(n, 0.0);
    g.assign(n, 0.0);
  }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

// 2-D convolution, stride 1, zero padding (k-1)/2 (odd kernels only).
// Weights are laid out [ky][kx][cin][cout] so the inner accumulation runs
// contiguously over output channels.
struct Conv2d {
  int kh = 0, kw = 0, cin = 0, cout = 0;
  Param weight, bias;
  Array3 input; // cached for backward

  void init(int kh_, int kw_, int cin_, int cout_, Rng& rng);
  Array3 forward(const Array3& in);
  // dout -> din; accumulates weight/bias grads when train is set.
  Array3 backward(const Array3& dout, bool train);
};

// 2x2 average pooling, stride 2. Dims must be even.
struct AvgPool2 {
  int in_h = 0, in_w = 0;
  Array3 forward(const Array3& in);
  Array3 backward(const Array3& dout) const;
};

// 2x nearest-neighbor upsampling.
struct Upsample2 {
  Array3 forward(const Array3& in) const;
  Array3 backward(const Array3& dout) const;
};

// x * sigmoid(x): smooth, so input-gradient checks against central
// differences are well conditioned everywhere.
struct SiLU {
  Array3 pre;
  Array3 forward(const Array3& in);
  Array3 backward(const Array3& dout) const;
};

struct SigmoidLayer {
  Array3 out;
  Array3 forward(const Array3& in);
  Array3 backward(const Array3& dout) const;
};

// Fully connected layer on feature vectors.
struct Dense {
  int in = 0, out = 0;
  Param weight, bias; // weight[in][out]
  std::vector<double> input;

  void init(int in_, int out_, Rng& rng);
  std::vector<double> forward(const std::vector<double>& x);
  std::vector<double> backward(const std::vector<double>& dout, bool train);
};

struct GlobalAvgPool {
  int in_h = 0, in_w = 0, in_c = 0;
  std::vector<double> forward(const Array3& in);
  Array3 backward(const std::vector<double>& dout) const;
};

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

// Softmax cross-entropy on a logit vector; fills dlogits and returns the loss.
double softmax_cross_entropy(const std::vector<double>& logits, int label,
                             std::vector<double>* dlogits);

// ---------------------------------------------------------------------------
// Optimizers. Both are adaptive per-coordinate first-order methods; Adamax
// uses an infinity-norm second moment (update rule recorded in forge logs).
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adam_step(std::vector<double>& w, const std::vector<double>& g,
               AdamState& st, double lr);

struct AdamaxState {
  std::vector<double> m, u;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adamax_step(std::vector<double>& w, const std::vector<double>& g,
                 AdamaxState& st, double lr);

}  // namespace rapforge
