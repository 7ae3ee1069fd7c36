#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <vector>

#include "rapforge/common.hpp"

namespace rapforge {

// Row-major H x W x C array of doubles. Feature maps, images, probability
// maps, masks, and targets all share this layout so compositing and loss
// code can operate on any of them.
struct Array3 {
  int h = 0, w = 0, c = 0;
  std::vector<double> v;

  Array3() = default;
  Array3(int h_, int w_, int c_, double fill = 0.0)
      : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, fill) {}

  size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }

  double& at(int y, int x, int ch) {
    return v[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  double at(int y, int x, int ch) const {
    return v[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  double* row(int y, int x) { return &v[(static_cast<size_t>(y) * w + x) * c]; }
  const double* row(int y, int x) const {
    return &v[(static_cast<size_t>(y) * w + x) * c];
  }

  void fill(double value) { std::fill(v.begin(), v.end(), value); }

  bool same_shape(const Array3& o) const {
    return h == o.h && w == o.w && c == o.c;
  }

  void require_shape(int hh, int ww, int cc, const char* who) const {
    if (h != hh || w != ww || c != cc)
      throw ShapeError(std::string(who) + ": expected " + std::to_string(hh) +
                       "x" + std::to_string(ww) + "x" + std::to_string(cc) +
                       ", got " + std::to_string(h) + "x" + std::to_string(w) +
                       "x" + std::to_string(c));
  }
};

// H x W integer array used for per-pixel class labels.
struct Array2i {
  int h = 0, w = 0;
  std::vector<int> v;

  Array2i() = default;
  Array2i(int h_, int w_, int fill = 0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  int& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  int at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  bool empty() const { return v.empty(); }
};

}  // namespace rapforge
