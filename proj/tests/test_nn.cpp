#include <doctest.h>

#include "rapforge/nn.hpp"
#include "test_support.hpp"

using namespace rapforge;
using rapforge::testing::rel_err;

namespace {

// Scalar loss = sum(weights * out) lets us check din against finite
// differences of the full forward map.
double weighted_sum(const Array3& a, const Array3& w) {
  double acc = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) acc += a.v[i] * w.v[i];
  return acc;
}

Array3 random_array(int h, int w, int c, uint64_t seed) {
  Rng rng(seed);
  Array3 a(h, w, c);
  for (double& v : a.v) v = rng.uniform(-1.0, 1.0);
  return a;
}

}  // namespace

TEST_CASE("conv2d input and weight gradients match finite differences") {
  Rng rng(11);
  Conv2d conv;
  conv.init(3, 3, 2, 3, rng);
  Array3 in = random_array(5, 6, 2, 12);
  const Array3 w = random_array(5, 6, 3, 13);

  conv.weight.zero_grad();
  conv.bias.zero_grad();
  conv.forward(in);
  const Array3 din = conv.backward(w, true);

  for (size_t i = 0; i < in.v.size(); i += 7) {
    const double fd = rapforge::testing::central_diff(
        [&](double x) {
          Array3 in2 = in;
          in2.v[i] = x;
          Conv2d c2 = conv;
          return weighted_sum(c2.forward(in2), w);
        },
        in.v[i]);
    CHECK(rel_err(din.v[i], fd) < 1e-6);
  }
  for (size_t i = 0; i < conv.weight.w.size(); i += 11) {
    const double fd = rapforge::testing::central_diff(
        [&](double x) {
          Conv2d c2 = conv;
          c2.weight.w[i] = x;
          return weighted_sum(c2.forward(in), w);
        },
        conv.weight.w[i]);
    CHECK(rel_err(conv.weight.g[i], fd) < 1e-6);
  }
  for (size_t i = 0; i < conv.bias.w.size(); ++i) {
    const double fd = rapforge::testing::central_diff(
        [&](double x) {
          Conv2d c2 = conv;
          c2.bias.w[i] = x;
          return weighted_sum(c2.forward(in), w);
        },
        conv.bias.w[i]);
    CHECK(rel_err(conv.bias.g[i], fd) < 1e-6);
  }
}

TEST_CASE("pool, upsample, activations backpropagate exactly") {
  const Array3 in = random_array(4, 6, 3, 21);
  const Array3 w_half = random_array(2, 3, 3, 22);
  const Array3 w_same = random_array(4, 6, 3, 23);
  const Array3 w_double = random_array(8, 12, 3, 24);

  SUBCASE("avgpool") {
    AvgPool2 pool;
    pool.forward(in);
    const Array3 din = pool.backward(w_half);
    for (size_t i = 0; i < in.v.size(); i += 5) {
      const double fd = rapforge::testing::central_diff(
          [&](double x) {
            Array3 in2 = in;
            in2.v[i] = x;
            AvgPool2 p2;
            return weighted_sum(p2.forward(in2), w_half);
          },
          in.v[i]);
      CHECK(rel_err(din.v[i], fd) < 1e-7);
    }
  }
  SUBCASE("upsample") {
    Upsample2 up;
    up.forward(in);
    const Array3 din = up.backward(w_double);
    for (size_t i = 0; i < in.v.size(); i += 5) {
      const double fd = rapforge::testing::central_diff(
          [&](double x) {
            Array3 in2 = in;
            in2.v[i] = x;
            Upsample2 u2;
            return weighted_sum(u2.forward(in2), w_double);
          },
          in.v[i]);
      CHECK(rel_err(din.v[i], fd) < 1e-7);
    }
  }
  SUBCASE("silu and sigmoid") {
    SiLU act;
    act.forward(in);
    const Array3 din = act.backward(w_same);
    SigmoidLayer sig;
    sig.forward(in);
    const Array3 din_s = sig.backward(w_same);
    for (size_t i = 0; i < in.v.size(); i += 5) {
      const double fd = rapforge::testing::central_diff(
          [&](double x) {
            SiLU a2;
            Array3 in2 = in;
            in2.v[i] = x;
            return weighted_sum(a2.forward(in2), w_same);
          },
          in.v[i]);
      CHECK(rel_err(din.v[i], fd) < 1e-6);
      const double fd_s = rapforge::testing::central_diff(
          [&](double x) {
            SigmoidLayer s2;
            Array3 in2 = in;
            in2.v[i] = x;
            return weighted_sum(s2.forward(in2), w_same);
          },
          in.v[i]);
      CHECK(rel_err(din_s.v[i], fd_s) < 1e-6);
    }
  }
}

TEST_CASE("dense and global pool gradients") {
  Rng rng(31);
  Dense d;
  d.init(6, 4, rng);
  std::vector<double> x(6), w(4);
  for (auto& v : x) v = rng.uniform(-1, 1);
  for (auto& v : w) v = rng.uniform(-1, 1);

  d.weight.zero_grad();
  d.bias.zero_grad();
  d.forward(x);
  const auto din = d.backward(w, true);
  auto loss_with = [&](Dense& dd, const std::vector<double>& xx) {
    const auto y = dd.forward(xx);
    double acc = 0;
    for (size_t o = 0; o < y.size(); ++o) acc += y[o] * w[o];
    return acc;
  };
  for (size_t i = 0; i < x.size(); ++i) {
    const double fd = rapforge::testing::central_diff(
        [&](double v) {
          Dense d2 = d;
          auto x2 = x;
          x2[i] = v;
          return loss_with(d2, x2);
        },
        x[i]);
    CHECK(rel_err(din[i], fd) < 1e-7);
  }
  for (size_t i = 0; i < d.weight.w.size(); i += 3) {
    const double fd = rapforge::testing::central_diff(
        [&](double v) {
          Dense d2 = d;
          d2.weight.w[i] = v;
          return loss_with(d2, x);
        },
        d.weight.w[i]);
    CHECK(rel_err(d.weight.g[i], fd) < 1e-7);
  }

  GlobalAvgPool gap;
  const Array3 in = random_array(3, 4, 5, 32);
  gap.forward(in);
  std::vector<double> gw(5);
  for (auto& v : gw) v = rng.uniform(-1, 1);
  const Array3 din_g = gap.backward(gw);
  for (size_t i = 0; i < in.v.size(); i += 4) {
    const double fd = rapforge::testing::central_diff(
        [&](double v) {
          GlobalAvgPool g2;
          Array3 in2 = in;
          in2.v[i] = v;
          const auto y = g2.forward(in2);
          double acc = 0;
          for (size_t o = 0; o < y.size(); ++o) acc += y[o] * gw[o];
          return acc;
        },
        in.v[i]);
    CHECK(rel_err(din_g.v[i], fd) < 1e-7);
  }
}

TEST_CASE("softmax cross entropy gradient") {
  std::vector<double> logits = {0.3, -1.2, 2.0, 0.1};
  std::vector<double> d;
  softmax_cross_entropy(logits, 2, &d);
  for (size_t i = 0; i < logits.size(); ++i) {
    const double fd = rapforge::testing::central_diff(
        [&](double v) {
          auto l2 = logits;
          l2[i] = v;
          return softmax_cross_entropy(l2, 2, nullptr);
        },
        logits[i]);
    CHECK(rel_err(d[i], fd) < 1e-6);
  }
}

TEST_CASE("optimizers reduce a quadratic") {
  // Both settle into a band around the optimum whose width scales with lr.
  for (int which = 0; which < 2; ++which) {
    std::vector<double> w = {0.0, 10.0, -4.0};
    AdamState adam;
    AdamaxState adamax;
    const double lr = 0.05;
    for (int it = 0; it < 1500; ++it) {
      std::vector<double> g(w.size());
      for (size_t i = 0; i < w.size(); ++i) g[i] = 2.0 * (w[i] - 3.0);
      if (which == 0)
        adam_step(w, g, adam, lr);
      else
        adamax_step(w, g, adamax, lr);
    }
    for (double v : w) CHECK(std::abs(v - 3.0) < 4 * lr);
  }
}
