#include "rapforge/nn.hpp"

#include <cmath>

namespace rapforge {

void Conv2d::init(int kh_, int kw_, int cin_, int cout_, Rng& rng) {
  kh = kh_;
  kw = kw_;
  cin = cin_;
  cout = cout_;
  weight.resize(static_cast<size_t>(kh) * kw * cin * cout);
  bias.resize(cout);
  // He-style init scaled for SiLU.
  const double scale = std::sqrt(2.0 / (kh * kw * cin));
  for (double& w : weight.w) w = rng.normal(0.0, scale);
}

Array3 Conv2d::forward(const Array3& in) {
  if (in.c != cin) throw ShapeError("Conv2d: input channels mismatch");
  input = in;
  const int h = in.h, w = in.w;
  const int py = (kh - 1) / 2, px = (kw - 1) / 2;
  Array3 out(h, w, cout);
  std::vector<double> acc(cout);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int o = 0; o < cout; ++o) acc[o] = bias.w[o];
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = y + ky - py;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = x + kx - px;
          if (ix < 0 || ix >= w) continue;
          const double* ip = in.row(iy, ix);
          const double* wp = &weight.w[((static_cast<size_t>(ky) * kw + kx) * cin) * cout];
          for (int ci = 0; ci < cin; ++ci) {
            const double a = ip[ci];
            const double* wrow = wp + static_cast<size_t>(ci) * cout;
            for (int o = 0; o < cout; ++o) acc[o] += a * wrow[o];
          }
        }
      }
      double* op = out.row(y, x);
      for (int o = 0; o < cout; ++o) op[o] = acc[o];
    }
  }
  return out;
}

Array3 Conv2d::backward(const Array3& dout, bool train) {
  const int h = input.h, w = input.w;
  dout.require_shape(h, w, cout, "Conv2d::backward");
  const int py = (kh - 1) / 2, px = (kw - 1) / 2;
  Array3 din(h, w, cin);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double* gp = dout.row(y, x);
      if (train) {
        double* bg = bias.g.data();
        for (int o = 0; o < cout; ++o) bg[o] += gp[o];
      }
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = y + ky - py;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = x + kx - px;
          if (ix < 0 || ix >= w) continue;
          const double* ip = input.row(iy, ix);
          double* dp = din.row(iy, ix);
          const size_t wbase = (static_cast<size_t>(ky) * kw + kx) * cin;
          for (int ci = 0; ci < cin; ++ci) {
            const double* wrow = &weight.w[(wbase + ci) * cout];
            double acc = 0.0;
            for (int o = 0; o < cout; ++o) acc += wrow[o] * gp[o];
            dp[ci] += acc;
            if (train) {
              double* grow = &weight.g[(wbase + ci) * cout];
              const double a = ip[ci];
              for (int o = 0; o < cout; ++o) grow[o] += a * gp[o];
            }
          }
        }
      }
    }
  }
  return din;
}

Array3 AvgPool2::forward(const Array3& in) {
  if (in.h % 2 != 0 || in.w % 2 != 0)
    throw ShapeError("AvgPool2: dims must be even");
  in_h = in.h;
  in_w = in.w;
  Array3 out(in.h / 2, in.w / 2, in.c);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      const double* a = in.row(2 * y, 2 * x);
      const double* b = in.row(2 * y, 2 * x + 1);
      const double* c = in.row(2 * y + 1, 2 * x);
      const double* d = in.row(2 * y + 1, 2 * x + 1);
      double* o = out.row(y, x);
      for (int ch = 0; ch < in.c; ++ch)
        o[ch] = 0.25 * (a[ch] + b[ch] + c[ch] + d[ch]);
    }
  return out;
}

Array3 AvgPool2::backward(const Array3& dout) const {
  Array3 din(in_h, in_w, dout.c);
  for (int y = 0; y < dout.h; ++y)
    for (int x = 0; x < dout.w; ++x) {
      const double* g = dout.row(y, x);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double* d = din.row(2 * y + dy, 2 * x + dx);
          for (int ch = 0; ch < dout.c; ++ch) d[ch] = 0.25 * g[ch];
        }
    }
  return din;
}

Array3 Upsample2::forward(const Array3& in) const {
  Array3 out(in.h * 2, in.w * 2, in.c);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      const double* s = in.row(y, x);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double* o = out.row(2 * y + dy, 2 * x + dx);
          for (int ch = 0; ch < in.c; ++ch) o[ch] = s[ch];
        }
    }
  return out;
}

Array3 Upsample2::backward(const Array3& dout) const {
  if (dout.h % 2 != 0 || dout.w % 2 != 0)
    throw ShapeError("Upsample2::backward: dims must be even");
  Array3 din(dout.h / 2, dout.w / 2, dout.c);
  for (int y = 0; y < din.h; ++y)
    for (int x = 0; x < din.w; ++x) {
      double* d = din.row(y, x);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double* g = dout.row(2 * y + dy, 2 * x + dx);
          for (int ch = 0; ch < dout.c; ++ch) d[ch] += g[ch];
        }
    }
  return din;
}

Array3 SiLU::forward(const Array3& in) {
  pre = in;
  Array3 out(in.h, in.w, in.c);
  for (size_t i = 0; i < in.v.size(); ++i) out.v[i] = silu(in.v[i]);
  return out;
}

Array3 SiLU::backward(const Array3& dout) const {
  Array3 din(pre.h, pre.w, pre.c);
  for (size_t i = 0; i < pre.v.size(); ++i)
    din.v[i] = dout.v[i] * silu_grad(pre.v[i]);
  return din;
}

Array3 SigmoidLayer::forward(const Array3& in) {
  out = Array3(in.h, in.w, in.c);
  for (size_t i = 0; i < in.v.size(); ++i) out.v[i] = sigmoid(in.v[i]);
  return out;
}

Array3 SigmoidLayer::backward(const Array3& dout) const {
  Array3 din(out.h, out.w, out.c);
  for (size_t i = 0; i < out.v.size(); ++i)
    din.v[i] = dout.v[i] * out.v[i] * (1.0 - out.v[i]);
  return din;
}

void Dense::init(int in_, int out_, Rng& rng) {
  in = in_;
  out = out_;
  weight.resize(static_cast<size_t>(in) * out);
  bias.resize(out);
  const double scale = std::sqrt(2.0 / in);
  for (double& w : weight.w) w = rng.normal(0.0, scale);
}

std::vector<double> Dense::forward(const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != in) throw ShapeError("Dense: input size mismatch");
  input = x;
  std::vector<double> y(bias.w);
  for (int i = 0; i < in; ++i) {
    const double a = x[i];
    const double* wrow = &weight.w[static_cast<size_t>(i) * out];
    for (int o = 0; o < out; ++o) y[o] += a * wrow[o];
  }
  return y;
}

std::vector<double> Dense::backward(const std::vector<double>& dout, bool train) {
  std::vector<double> din(in, 0.0);
  for (int i = 0; i < in; ++i) {
    const double* wrow = &weight.w[static_cast<size_t>(i) * out];
    double acc = 0.0;
    for (int o = 0; o < out; ++o) acc += wrow[o] * dout[o];
    din[i] = acc;
    if (train) {
      double* grow = &weight.g[static_cast<size_t>(i) * out];
      const double a = input[i];
      for (int o = 0; o < out; ++o) grow[o] += a * dout[o];
    }
  }
  if (train)
    for (int o = 0; o < out; ++o) bias.g[o] += dout[o];
  return din;
}

std::vector<double> GlobalAvgPool::forward(const Array3& in) {
  in_h = in.h;
  in_w = in.w;
  in_c = in.c;
  std::vector<double> out(in.c, 0.0);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      const double* p = in.row(y, x);
      for (int c = 0; c < in.c; ++c) out[c] += p[c];
    }
  const double inv = 1.0 / (static_cast<double>(in.h) * in.w);
  for (double& o : out) o *= inv;
  return out;
}

Array3 GlobalAvgPool::backward(const std::vector<double>& dout) const {
  Array3 din(in_h, in_w, in_c);
  const double inv = 1.0 / (static_cast<double>(in_h) * in_w);
  for (int y = 0; y < in_h; ++y)
    for (int x = 0; x < in_w; ++x) {
      double* d = din.row(y, x);
      for (int c = 0; c < in_c; ++c) d[c] = dout[c] * inv;
    }
  return din;
}

double softmax_cross_entropy(const std::vector<double>& logits, int label,
                             std::vector<double>* dlogits) {
  const int n = static_cast<int>(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  std::vector<double> p(n);
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (int i = 0; i < n; ++i) p[i] /= z;
  if (dlogits) {
    dlogits->assign(n, 0.0);
    for (int i = 0; i < n; ++i) (*dlogits)[i] = p[i] - (i == label ? 1.0 : 0.0);
  }
  const double eps = 1e-12;
  return -std::log(std::max(p[label], eps));
}

void adam_step(std::vector<double>& w, const std::vector<double>& g,
               AdamState& st, double lr) {
  if (st.m.size() != w.size()) {
    st.m.assign(w.size(), 0.0);
    st.v.assign(w.size(), 0.0);
    st.t = 0;
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < w.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g[i] * g[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
  }
}

void adamax_step(std::vector<double>& w, const std::vector<double>& g,
                 AdamaxState& st, double lr) {
  if (st.m.size() != w.size()) {
    st.m.assign(w.size(), 0.0);
    st.u.assign(w.size(), 0.0);
    st.t = 0;
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  for (size_t i = 0; i < w.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g[i];
    st.u[i] = std::max(st.beta2 * st.u[i], std::abs(g[i]));
    w[i] -= lr * (st.m[i] / bc1) / (st.u[i] + st.eps);
  }
}

}  // namespace rapforge
