#pragma once

#include <cassert>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wmbench {

// Dense float32 image batch in NCHW order. Fully-connected activations use
// the degenerate shape (n, features, 1, 1) so one type serves the whole net.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0f) {}

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.n, t.c, t.h, t.w); }

  size_t size() const { return data.size(); }
  int per_sample() const { return c * h * w; }

  float& at(int in, int ic, int ih, int iw) {
    return data[((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw];
  }
  float at(int in, int ic, int ih, int iw) const {
    return data[((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw];
  }

  float* sample(int in) { return data.data() + static_cast<size_t>(in) * per_sample(); }
  const float* sample(int in) const { return data.data() + static_cast<size_t>(in) * per_sample(); }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }

  // Copy of samples picked by index, in the given order.
  Tensor gather(const std::vector<int>& idx) const {
    Tensor out(static_cast<int>(idx.size()), c, h, w);
    const int ps = per_sample();
    for (size_t i = 0; i < idx.size(); i++) {
      if (idx[i] < 0 || idx[i] >= n) throw std::out_of_range("Tensor::gather index");
      std::copy(sample(idx[i]), sample(idx[i]) + ps, out.sample(static_cast<int>(i)));
    }
    return out;
  }

  static Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.n == 0) return b;
    if (b.n == 0) return a;
    if (a.c != b.c || a.h != b.h || a.w != b.w)
      throw std::invalid_argument("Tensor::concat shape mismatch " + a.shape_str() + " vs " +
                                  b.shape_str());
    Tensor out(a.n + b.n, a.c, a.h, a.w);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
  }
};

struct Shape {
  int c = 0, h = 0, w = 0;
  bool operator==(const Shape&) const = default;
  int pixels() const { return c * h * w; }
  std::string str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }
};

inline Shape shape_of(const Tensor& t) { return Shape{t.c, t.h, t.w}; }

inline float clampf(float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Snap a unit-interval intensity to the nearest 8-bit representable level.
// Key images are stored as PNG, so generators quantize up front to make the
// archive round-trip exact.
inline float quantize8(float v) {
  float q = clampf(v, 0.0f, 1.0f) * 255.0f + 0.5f;
  return static_cast<float>(static_cast<int>(q)) / 255.0f;
}

}  // namespace wmbench
