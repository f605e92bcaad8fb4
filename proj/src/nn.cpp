#include "wmbench/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <stdexcept>

#include "wmbench/util.hpp"

namespace wmbench {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;

namespace {

void fill_normal(std::vector<float>& v, double stddev, uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<float> d(0.0f, static_cast<float>(stddev));
  for (auto& x : v) x = d(rng);
}

// col has one row per (in_channel, ky, kx) and one column per
// (sample, oy, ox); building it for the whole batch keeps the GEMMs big
// enough to hit vector throughput on a single core.
void im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow, Mat& col) {
  const int rows = x.c * k * k;
  const auto cols = static_cast<Eigen::Index>(x.n) * oh * ow;
  col.resize(rows, cols);
  for (int ci = 0; ci < x.c; ci++) {
    for (int ky = 0; ky < k; ky++) {
      for (int kx = 0; kx < k; kx++) {
        const int r = (ci * k + ky) * k + kx;
        float* dst = col.data() + static_cast<size_t>(r) * cols;
        for (int s = 0; s < x.n; s++) {
          const float* src = x.sample(s) + static_cast<size_t>(ci) * x.h * x.w;
          for (int oy = 0; oy < oh; oy++) {
            const int iy = oy * stride - pad + ky;
            const bool row_ok = iy >= 0 && iy < x.h;
            for (int ox = 0; ox < ow; ox++) {
              const int ix = ox * stride - pad + kx;
              *dst++ = (row_ok && ix >= 0 && ix < x.w) ? src[iy * x.w + ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const Mat& col, int k, int stride, int pad, int oh, int ow, Tensor& dx) {
  const auto cols = static_cast<Eigen::Index>(dx.n) * oh * ow;
  for (int ci = 0; ci < dx.c; ci++) {
    for (int ky = 0; ky < k; ky++) {
      for (int kx = 0; kx < k; kx++) {
        const int r = (ci * k + ky) * k + kx;
        const float* src = col.data() + static_cast<size_t>(r) * cols;
        for (int s = 0; s < dx.n; s++) {
          float* dst = dx.sample(s) + static_cast<size_t>(ci) * dx.h * dx.w;
          for (int oy = 0; oy < oh; oy++) {
            const int iy = oy * stride - pad + ky;
            const bool row_ok = iy >= 0 && iy < dx.h;
            for (int ox = 0; ox < ow; ox++) {
              const float v = *src++;
              if (!row_ok) continue;
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < dx.w) dst[iy * dx.w + ix] += v;
            }
          }
        }
      }
    }
  }
}

// Computes the transformed weights and the per-weight chain factor for the
// exponential weighting transform. Denominator (max response) is treated as
// a constant during backprop.
void ew_transform(const std::vector<float>& w, double theta, std::vector<float>& w_eff,
                  std::vector<float>& chain) {
  w_eff.resize(w.size());
  chain.resize(w.size());
  float max_abs = 0.0f;
  for (float x : w) max_abs = std::max(max_abs, std::abs(x));
  const float denom = std::exp(static_cast<float>(theta) * max_abs);
  for (size_t i = 0; i < w.size(); i++) {
    const float a = std::abs(w[i]);
    const float e = std::exp(static_cast<float>(theta) * a);
    w_eff[i] = w[i] * e / denom;
    chain[i] = e * (1.0f + static_cast<float>(theta) * a) / denom;
  }
}

}  // namespace

int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

void conv_forward(const Tensor& x, const std::vector<float>& weight, const std::vector<float>& bias,
                  int out_c, int k, int stride, int pad, Tensor& y) {
  const int oh = conv_out_dim(x.h, k, stride, pad);
  const int ow = conv_out_dim(x.w, k, stride, pad);
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv_forward: empty output plane");
  y = Tensor(x.n, out_c, oh, ow);

  Mat col;
  im2col(x, k, stride, pad, oh, ow, col);
  CMapMat wmat(weight.data(), out_c, x.c * k * k);
  Mat out = wmat * col;  // (out_c, n*oh*ow)

  const int plane = oh * ow;
  for (int oc = 0; oc < out_c; oc++) {
    const float b = bias[oc];
    const float* src = out.data() + static_cast<size_t>(oc) * x.n * plane;
    for (int s = 0; s < x.n; s++) {
      float* dst = y.sample(s) + static_cast<size_t>(oc) * plane;
      for (int p = 0; p < plane; p++) dst[p] = src[s * plane + p] + b;
    }
  }
}

void conv_backward(const Tensor& x, const Tensor& dy, const std::vector<float>& weight, int out_c,
                   int k, int stride, int pad, std::vector<float>* dweight, std::vector<float>* dbias,
                   Tensor* dx) {
  const int oh = dy.h, ow = dy.w;
  const int plane = oh * ow;
  const auto cols = static_cast<Eigen::Index>(x.n) * plane;

  // Regroup dy from per-sample planes into the (out_c, n*oh*ow) layout the
  // GEMMs want.
  Mat dy_mat(out_c, cols);
  for (int oc = 0; oc < out_c; oc++) {
    float* dst = dy_mat.data() + static_cast<size_t>(oc) * cols;
    for (int s = 0; s < dy.n; s++) {
      const float* src = dy.sample(s) + static_cast<size_t>(oc) * plane;
      for (int p = 0; p < plane; p++) dst[s * plane + p] = src[p];
    }
  }

  Mat col;
  im2col(x, k, stride, pad, oh, ow, col);

  if (dweight != nullptr) {
    MapMat dwmat(dweight->data(), out_c, x.c * k * k);
    dwmat.noalias() += dy_mat * col.transpose();
  }
  if (dbias != nullptr) {
    for (int oc = 0; oc < out_c; oc++)
      (*dbias)[oc] += dy_mat.row(oc).sum();
  }
  if (dx != nullptr) {
    *dx = Tensor(x.n, x.c, x.h, x.w);
    CMapMat wmat(weight.data(), out_c, x.c * k * k);
    Mat dcol = wmat.transpose() * dy_mat;
    col2im_add(dcol, k, stride, pad, oh, ow, *dx);
  }
}

// ---- Conv2d ----

Conv2d::Conv2d(int in_c_, int out_c_, int k_, int stride_, int pad_, uint64_t seed)
    : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_), pad(pad_) {
  weight.init(static_cast<size_t>(out_c) * in_c * k * k, "conv_w");
  bias.init(out_c, "conv_b");
  fill_normal(weight.v, std::sqrt(2.0 / (in_c * k * k)), seed);
}

const std::vector<float>& Conv2d::effective_weight() {
  if (ew_theta == 0.0) return weight.v;
  ew_transform(weight.v, ew_theta, ew_w_, ew_chain_);
  return ew_w_;
}

void Conv2d::bake_ew() {
  if (ew_theta == 0.0) return;
  ew_transform(weight.v, ew_theta, ew_w_, ew_chain_);
  weight.v = ew_w_;
  ew_theta = 0.0;
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  last_x_ = x;
  Tensor y;
  conv_forward(x, effective_weight(), bias.v, out_c, k, stride, pad, y);
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  Tensor dx;
  if (ew_theta == 0.0) {
    conv_backward(last_x_, dy, weight.v, out_c, k, stride, pad, &weight.g, &bias.g, &dx);
  } else {
    std::vector<float> dw_eff(weight.v.size(), 0.0f);
    conv_backward(last_x_, dy, ew_w_, out_c, k, stride, pad, &dw_eff, &bias.g, &dx);
    for (size_t i = 0; i < weight.v.size(); i++) weight.g[i] += dw_eff[i] * ew_chain_[i];
  }
  return dx;
}

// ---- Dense ----

Dense::Dense(int in_f_, int out_f_, uint64_t seed) : in_f(in_f_), out_f(out_f_) {
  weight.init(static_cast<size_t>(out_f) * in_f, "dense_w");
  bias.init(out_f, "dense_b");
  fill_normal(weight.v, std::sqrt(2.0 / in_f), seed);
}

const std::vector<float>& Dense::effective_weight() {
  if (ew_theta == 0.0) return weight.v;
  ew_transform(weight.v, ew_theta, ew_w_, ew_chain_);
  return ew_w_;
}

void Dense::bake_ew() {
  if (ew_theta == 0.0) return;
  ew_transform(weight.v, ew_theta, ew_w_, ew_chain_);
  weight.v = ew_w_;
  ew_theta = 0.0;
}

Tensor Dense::forward(const Tensor& x, bool) {
  if (x.per_sample() != in_f)
    throw std::invalid_argument("Dense: expected " + std::to_string(in_f) + " features, got " +
                                x.shape_str());
  last_x_ = x;
  Tensor y(x.n, out_f, 1, 1);
  CMapMat xm(x.data.data(), x.n, in_f);
  CMapMat wm(effective_weight().data(), out_f, in_f);
  MapMat ym(y.data.data(), x.n, out_f);
  ym.noalias() = xm * wm.transpose();
  for (int s = 0; s < x.n; s++)
    for (int o = 0; o < out_f; o++) ym(s, o) += bias.v[o];
  return y;
}

Tensor Dense::backward(const Tensor& dy) {
  const int n = dy.n;
  CMapMat dym(dy.data.data(), n, out_f);
  CMapMat xm(last_x_.data.data(), n, in_f);

  const std::vector<float>& w_eff = (ew_theta == 0.0) ? weight.v : ew_w_;
  if (ew_theta == 0.0) {
    MapMat dwm(weight.g.data(), out_f, in_f);
    dwm.noalias() += dym.transpose() * xm;
  } else {
    Mat dw_eff = dym.transpose() * xm;
    for (size_t i = 0; i < weight.v.size(); i++) weight.g[i] += dw_eff.data()[i] * ew_chain_[i];
  }
  for (int o = 0; o < out_f; o++) bias.g[o] += dym.col(o).sum();

  Tensor dx(last_x_.n, last_x_.c, last_x_.h, last_x_.w);
  CMapMat wm(w_eff.data(), out_f, in_f);
  MapMat dxm(dx.data.data(), n, in_f);
  dxm.noalias() = dym * wm;
  return dx;
}

// ---- elementwise layers ----

Tensor ReLU::forward(const Tensor& x, bool) {
  Tensor y = x;
  mask_.assign(x.size(), false);
  for (size_t i = 0; i < y.data.size(); i++) {
    if (y.data[i] > 0.0f)
      mask_[i] = true;
    else
      y.data[i] = 0.0f;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.data.size(); i++)
    if (!mask_[i]) dx.data[i] = 0.0f;
  return dx;
}

Tensor Tanh::forward(const Tensor& x, bool) {
  Tensor y = x;
  for (auto& v : y.data) v = std::tanh(v);
  last_y_ = y;
  return y;
}

Tensor Tanh::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.data.size(); i++) {
    const float t = last_y_.data[i];
    dx.data[i] *= 1.0f - t * t;
  }
  return dx;
}

Tensor Sigmoid::forward(const Tensor& x, bool) {
  Tensor y = x;
  for (auto& v : y.data) v = 1.0f / (1.0f + std::exp(-v));
  last_y_ = y;
  return y;
}

Tensor Sigmoid::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.data.size(); i++) {
    const float s = last_y_.data[i];
    dx.data[i] *= s * (1.0f - s);
  }
  return dx;
}

// ---- pooling / shape layers ----

Tensor MaxPool2::forward(const Tensor& x, bool) {
  if (x.h % 2 != 0 || x.w % 2 != 0)
    throw std::invalid_argument("MaxPool2 needs even spatial dims, got " + x.shape_str());
  in_n_ = x.n;
  in_c_ = x.c;
  in_h_ = x.h;
  in_w_ = x.w;
  Tensor y(x.n, x.c, x.h / 2, x.w / 2);
  argmax_.assign(y.size(), 0);
  size_t o = 0;
  for (int s = 0; s < x.n; s++) {
    for (int ci = 0; ci < x.c; ci++) {
      const float* plane = x.sample(s) + static_cast<size_t>(ci) * x.h * x.w;
      for (int oy = 0; oy < y.h; oy++) {
        for (int ox = 0; ox < y.w; ox++) {
          int best = (2 * oy) * x.w + 2 * ox;
          float bv = plane[best];
          const int cand[3] = {best + 1, best + x.w, best + x.w + 1};
          for (int idx : cand) {
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
          y.data[o] = bv;
          argmax_[o] = best;
          o++;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2::backward(const Tensor& dy) {
  Tensor dx(in_n_, in_c_, in_h_, in_w_);
  size_t o = 0;
  for (int s = 0; s < dy.n; s++) {
    for (int ci = 0; ci < dy.c; ci++) {
      float* plane = dx.sample(s) + static_cast<size_t>(ci) * in_h_ * in_w_;
      for (int p = 0; p < dy.h * dy.w; p++, o++) plane[argmax_[o]] += dy.data[o];
    }
  }
  return dx;
}

Tensor Upsample2::forward(const Tensor& x, bool) {
  Tensor y(x.n, x.c, x.h * 2, x.w * 2);
  for (int s = 0; s < x.n; s++) {
    for (int ci = 0; ci < x.c; ci++) {
      const float* sp = x.sample(s) + static_cast<size_t>(ci) * x.h * x.w;
      float* dp = y.sample(s) + static_cast<size_t>(ci) * y.h * y.w;
      for (int iy = 0; iy < x.h; iy++) {
        for (int ix = 0; ix < x.w; ix++) {
          const float v = sp[iy * x.w + ix];
          float* d = dp + (2 * iy) * y.w + 2 * ix;
          d[0] = v;
          d[1] = v;
          d[y.w] = v;
          d[y.w + 1] = v;
        }
      }
    }
  }
  return y;
}

Tensor Upsample2::backward(const Tensor& dy) {
  Tensor dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int s = 0; s < dy.n; s++) {
    for (int ci = 0; ci < dy.c; ci++) {
      const float* dp = dy.sample(s) + static_cast<size_t>(ci) * dy.h * dy.w;
      float* sp = dx.sample(s) + static_cast<size_t>(ci) * dx.h * dx.w;
      for (int iy = 0; iy < dx.h; iy++) {
        for (int ix = 0; ix < dx.w; ix++) {
          const float* d = dp + (2 * iy) * dy.w + 2 * ix;
          sp[iy * dx.w + ix] = d[0] + d[1] + d[dy.w] + d[dy.w + 1];
        }
      }
    }
  }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  in_h_ = x.h;
  in_w_ = x.w;
  Tensor y(x.n, x.c, 1, 1);
  const float inv = 1.0f / static_cast<float>(x.h * x.w);
  for (int s = 0; s < x.n; s++) {
    for (int ci = 0; ci < x.c; ci++) {
      const float* plane = x.sample(s) + static_cast<size_t>(ci) * x.h * x.w;
      float acc = 0.0f;
      for (int p = 0; p < x.h * x.w; p++) acc += plane[p];
      y.at(s, ci, 0, 0) = acc * inv;
    }
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx(dy.n, dy.c, in_h_, in_w_);
  const float inv = 1.0f / static_cast<float>(in_h_ * in_w_);
  for (int s = 0; s < dy.n; s++) {
    for (int ci = 0; ci < dy.c; ci++) {
      const float g = dy.at(s, ci, 0, 0) * inv;
      float* plane = dx.sample(s) + static_cast<size_t>(ci) * in_h_ * in_w_;
      for (int p = 0; p < in_h_ * in_w_; p++) plane[p] = g;
    }
  }
  return dx;
}

Tensor Flatten::forward(const Tensor& x, bool) {
  in_c_ = x.c;
  in_h_ = x.h;
  in_w_ = x.w;
  Tensor y = x;
  y.c = x.per_sample();
  y.h = 1;
  y.w = 1;
  return y;
}

Tensor Flatten::backward(const Tensor& dy) {
  Tensor dx = dy;
  dx.c = in_c_;
  dx.h = in_h_;
  dx.w = in_w_;
  return dx;
}

// ---- ResBlock ----

ResBlock::ResBlock(int in_c, int out_c, int stride, uint64_t seed) {
  conv1 = std::make_unique<Conv2d>(in_c, out_c, 3, stride, 1, derive_seed(seed, "c1"));
  conv2 = std::make_unique<Conv2d>(out_c, out_c, 3, 1, 1, derive_seed(seed, "c2"));
  if (in_c != out_c || stride != 1)
    proj = std::make_unique<Conv2d>(in_c, out_c, 1, stride, 0, derive_seed(seed, "proj"));
  relu_ = std::make_unique<ReLU>();
  branch_scale.init(1, "res_scale");  // zero: block starts as identity
}

ResBlock::ResBlock(const ResBlock& o)
    : conv1(std::make_unique<Conv2d>(*o.conv1)),
      conv2(std::make_unique<Conv2d>(*o.conv2)),
      proj(o.proj ? std::make_unique<Conv2d>(*o.proj) : nullptr),
      branch_scale(o.branch_scale),
      relu_(std::make_unique<ReLU>()) {}

Tensor ResBlock::forward(const Tensor& x, bool train) {
  shortcut_in_ = x;
  Tensor b = conv1->forward(x, train);
  b = relu_->forward(b, train);
  b = conv2->forward(b, train);
  branch_out_ = b;
  Tensor sc = proj ? proj->forward(x, train) : x;
  const float a = branch_scale.v[0];
  Tensor y = sc;
  for (size_t i = 0; i < y.data.size(); i++) y.data[i] += a * b.data[i];
  return y;
}

Tensor ResBlock::backward(const Tensor& dy) {
  const float a = branch_scale.v[0];
  double ds = 0.0;
  for (size_t i = 0; i < dy.data.size(); i++) ds += static_cast<double>(dy.data[i]) * branch_out_.data[i];
  branch_scale.g[0] += static_cast<float>(ds);

  Tensor db = dy;
  for (auto& v : db.data) v *= a;
  db = conv2->backward(db);
  db = relu_->backward(db);
  db = conv1->backward(db);

  Tensor dsc = proj ? proj->backward(dy) : dy;
  Tensor dx = dsc;
  for (size_t i = 0; i < dx.data.size(); i++) dx.data[i] += db.data[i];
  return dx;
}

std::vector<Param*> ResBlock::params() {
  std::vector<Param*> ps = {&conv1->weight, &conv1->bias, &conv2->weight, &conv2->bias};
  if (proj) {
    ps.push_back(&proj->weight);
    ps.push_back(&proj->bias);
  }
  ps.push_back(&branch_scale);
  return ps;
}

// ---- PassportConv ----

PassportConv::PassportConv(int in_c_, int out_c_, int k_, int stride_, int pad_, uint64_t seed)
    : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_), pad(pad_) {
  weight.init(static_cast<size_t>(out_c) * in_c * k * k, "pconv_w");
  bias.init(out_c, "pconv_b");
  bypass_scale.init(out_c, "pconv_scale");
  bypass_bias.init(out_c, "pconv_bias");
  for (auto& s : bypass_scale.v) s = 1.0f;
  fill_normal(weight.v, std::sqrt(2.0 / (in_c * k * k)), seed);
}

void PassportConv::set_passports(const Tensor& gamma_src, const Tensor& beta_src) {
  if (gamma_src.n != 1 || beta_src.n != 1 || gamma_src.c != in_c || beta_src.c != in_c)
    throw std::invalid_argument("passport shape mismatch for layer with in_c=" +
                                std::to_string(in_c));
  passport_gamma = gamma_src;
  passport_beta = beta_src;
}

Tensor PassportConv::forward(const Tensor& x, bool) {
  last_x_ = x;
  conv_forward(x, weight.v, bias.v, out_c, k, stride, pad, conv_x_);
  const int plane = conv_x_.h * conv_x_.w;
  Tensor y = conv_x_;

  if (mode == PassportMode::bypass) {
    for (int s = 0; s < y.n; s++) {
      for (int oc = 0; oc < out_c; oc++) {
        float* p = y.sample(s) + static_cast<size_t>(oc) * plane;
        const float sc = bypass_scale.v[oc], bi = bypass_bias.v[oc];
        for (int i = 0; i < plane; i++) p[i] = sc * p[i] + bi;
      }
    }
    return y;
  }

  if (passport_gamma.n != 1)
    throw std::logic_error("passport mode requested but no passports bound");
  conv_forward(passport_gamma, weight.v, bias.v, out_c, k, stride, pad, conv_g_);
  conv_forward(passport_beta, weight.v, bias.v, out_c, k, stride, pad, conv_b_);
  gamma_.assign(out_c, 0.0f);
  beta_.assign(out_c, 0.0f);
  const float inv = 1.0f / static_cast<float>(plane);
  for (int oc = 0; oc < out_c; oc++) {
    const float* gp = conv_g_.sample(0) + static_cast<size_t>(oc) * plane;
    const float* bp = conv_b_.sample(0) + static_cast<size_t>(oc) * plane;
    float ga = 0.0f, ba = 0.0f;
    for (int i = 0; i < plane; i++) {
      ga += gp[i];
      ba += bp[i];
    }
    gamma_[oc] = ga * inv;
    beta_[oc] = ba * inv;
  }
  for (int s = 0; s < y.n; s++) {
    for (int oc = 0; oc < out_c; oc++) {
      float* p = y.sample(s) + static_cast<size_t>(oc) * plane;
      for (int i = 0; i < plane; i++) p[i] = gamma_[oc] * p[i] + beta_[oc];
    }
  }
  return y;
}

Tensor PassportConv::backward(const Tensor& dy) {
  const int plane = conv_x_.h * conv_x_.w;
  Tensor dconv = dy;
  std::vector<float> dscale(out_c, 0.0f), dbias_aff(out_c, 0.0f);

  const std::vector<float>& scale = (mode == PassportMode::bypass) ? bypass_scale.v : gamma_;
  for (int s = 0; s < dy.n; s++) {
    for (int oc = 0; oc < out_c; oc++) {
      const float* dp = dy.sample(s) + static_cast<size_t>(oc) * plane;
      const float* cp = conv_x_.sample(s) + static_cast<size_t>(oc) * plane;
      float* dc = dconv.sample(s) + static_cast<size_t>(oc) * plane;
      float acc_s = 0.0f, acc_b = 0.0f;
      for (int i = 0; i < plane; i++) {
        acc_s += dp[i] * cp[i];
        acc_b += dp[i];
        dc[i] = dp[i] * scale[oc];
      }
      dscale[oc] += acc_s;
      dbias_aff[oc] += acc_b;
    }
  }

  Tensor dx;
  conv_backward(last_x_, dconv, weight.v, out_c, k, stride, pad, &weight.g, &bias.g, &dx);

  if (mode == PassportMode::bypass) {
    for (int oc = 0; oc < out_c; oc++) {
      bypass_scale.g[oc] += dscale[oc];
      bypass_bias.g[oc] += dbias_aff[oc];
    }
    return dx;
  }

  // Affine params came from the filter bank itself: push d(gamma)/d(beta)
  // back through the passport responses.
  const float inv = 1.0f / static_cast<float>(plane);
  Tensor dg(1, out_c, conv_g_.h, conv_g_.w), db(1, out_c, conv_b_.h, conv_b_.w);
  for (int oc = 0; oc < out_c; oc++) {
    float* gp = dg.sample(0) + static_cast<size_t>(oc) * plane;
    float* bp = db.sample(0) + static_cast<size_t>(oc) * plane;
    const float gv = dscale[oc] * inv, bv = dbias_aff[oc] * inv;
    for (int i = 0; i < plane; i++) {
      gp[i] = gv;
      bp[i] = bv;
    }
  }
  conv_backward(passport_gamma, dg, weight.v, out_c, k, stride, pad, &weight.g, &bias.g, nullptr);
  conv_backward(passport_beta, db, weight.v, out_c, k, stride, pad, &weight.g, &bias.g, nullptr);
  return dx;
}

// ---- PassportBlock ----

PassportBlock::PassportBlock(int in_c, int out_c, int stride, uint64_t seed) {
  conv1 = std::make_unique<PassportConv>(in_c, out_c, 3, stride, 1, derive_seed(seed, "c1"));
  conv2 = std::make_unique<PassportConv>(out_c, out_c, 3, 1, 1, derive_seed(seed, "c2"));
  if (in_c != out_c || stride != 1)
    proj = std::make_unique<Conv2d>(in_c, out_c, 1, stride, 0, derive_seed(seed, "proj"));
  relu_ = std::make_unique<ReLU>();
  branch_scale.init(1, "pres_scale");
}

PassportBlock::PassportBlock(const PassportBlock& o)
    : conv1(std::make_unique<PassportConv>(*o.conv1)),
      conv2(std::make_unique<PassportConv>(*o.conv2)),
      proj(o.proj ? std::make_unique<Conv2d>(*o.proj) : nullptr),
      branch_scale(o.branch_scale),
      relu_(std::make_unique<ReLU>()) {}

Tensor PassportBlock::forward(const Tensor& x, bool train) {
  shortcut_in_ = x;
  Tensor b = conv1->forward(x, train);
  b = relu_->forward(b, train);
  b = conv2->forward(b, train);
  branch_out_ = b;
  Tensor sc = proj ? proj->forward(x, train) : x;
  const float a = branch_scale.v[0];
  Tensor y = sc;
  for (size_t i = 0; i < y.data.size(); i++) y.data[i] += a * b.data[i];
  return y;
}

Tensor PassportBlock::backward(const Tensor& dy) {
  const float a = branch_scale.v[0];
  double ds = 0.0;
  for (size_t i = 0; i < dy.data.size(); i++) ds += static_cast<double>(dy.data[i]) * branch_out_.data[i];
  branch_scale.g[0] += static_cast<float>(ds);

  Tensor db = dy;
  for (auto& v : db.data) v *= a;
  db = conv2->backward(db);
  db = relu_->backward(db);
  db = conv1->backward(db);

  Tensor dsc = proj ? proj->backward(dy) : dy;
  Tensor dx = dsc;
  for (size_t i = 0; i < dx.data.size(); i++) dx.data[i] += db.data[i];
  return dx;
}

std::vector<Param*> PassportBlock::params() {
  std::vector<Param*> ps;
  for (auto* c : {conv1.get(), conv2.get()}) {
    auto sub = c->params();
    ps.insert(ps.end(), sub.begin(), sub.end());
  }
  if (proj) {
    ps.push_back(&proj->weight);
    ps.push_back(&proj->bias);
  }
  ps.push_back(&branch_scale);
  return ps;
}

// ---- Sequential ----

Sequential::Sequential(const Sequential& o) {
  layers.reserve(o.layers.size());
  for (const auto& l : o.layers) layers.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& o) {
  if (this == &o) return *this;
  layers.clear();
  layers.reserve(o.layers.size());
  for (const auto& l : o.layers) layers.push_back(l->clone());
  return *this;
}

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (auto& l : layers) h = l->forward(h, train);
  return h;
}

Tensor Sequential::backward(const Tensor& dy) {
  Tensor g = dy;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = (*it)->backward(g);
  return g;
}

std::vector<Param*> Sequential::params() {
  std::vector<Param*> ps;
  for (auto& l : layers) {
    auto sub = l->params();
    ps.insert(ps.end(), sub.begin(), sub.end());
  }
  return ps;
}

void Sequential::zero_grad() {
  for (auto* p : params()) std::fill(p->g.begin(), p->g.end(), 0.0f);
}

// ---- losses ----

Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  const int k = logits.per_sample();
  for (int s = 0; s < logits.n; s++) {
    float* row = p.sample(s);
    float mx = row[0];
    for (int i = 1; i < k; i++) mx = std::max(mx, row[i]);
    double denom = 0.0;
    for (int i = 0; i < k; i++) {
      row[i] = std::exp(row[i] - mx);
      denom += row[i];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int i = 0; i < k; i++) row[i] *= inv;
  }
  return p;
}

LossGrad softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != logits.n)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  const int k = logits.per_sample();
  Tensor probs = softmax(logits);
  LossGrad out;
  out.grad = probs;
  double loss = 0.0;
  const float inv_n = 1.0f / static_cast<float>(logits.n);
  for (int s = 0; s < logits.n; s++) {
    const int y = labels[s];
    if (y < 0 || y >= k) throw std::out_of_range("softmax_cross_entropy: label out of range");
    float* row = out.grad.sample(s);
    loss -= std::log(std::max(row[y], 1e-12f));
    row[y] -= 1.0f;
    for (int i = 0; i < k; i++) row[i] *= inv_n;
  }
  out.loss = loss / logits.n;
  return out;
}

LossGrad mse_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
  LossGrad out;
  out.grad = Tensor::zeros_like(pred);
  double acc = 0.0;
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (size_t i = 0; i < pred.data.size(); i++) {
    const double d = static_cast<double>(pred.data[i]) - target.data[i];
    acc += d * d;
    out.grad.data[i] = static_cast<float>(2.0 * d * inv);
  }
  out.loss = acc * inv;
  return out;
}

LossGrad bce_loss(const Tensor& pred, const std::vector<float>& targets) {
  if (static_cast<int>(targets.size()) != pred.n || pred.per_sample() != 1)
    throw std::invalid_argument("bce_loss: expects (n,1) scores");
  LossGrad out;
  out.grad = Tensor::zeros_like(pred);
  double loss = 0.0;
  const double inv = 1.0 / pred.n;
  for (int s = 0; s < pred.n; s++) {
    const double p = std::clamp(static_cast<double>(pred.data[s]), 1e-7, 1.0 - 1e-7);
    const double t = targets[s];
    loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    out.grad.data[s] = static_cast<float>((-t / p + (1.0 - t) / (1.0 - p)) * inv);
  }
  out.loss = loss * inv;
  return out;
}

// ---- optimizer ----

Optimizer::Optimizer(std::vector<Param*> params, OptimSpec spec)
    : params_(std::move(params)), spec_(spec) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); i++) {
    m_[i].assign(params_[i]->v.size(), 0.0f);
    if (spec_.kind == OptimKind::adam) v_[i].assign(params_[i]->v.size(), 0.0f);
  }
}

void Optimizer::step() {
  t_++;
  if (spec_.kind == OptimKind::sgd) {
    const float lr = static_cast<float>(spec_.lr);
    const float mu = static_cast<float>(spec_.momentum);
    for (size_t i = 0; i < params_.size(); i++) {
      auto& p = *params_[i];
      if (mu == 0.0f) {
        for (size_t j = 0; j < p.v.size(); j++) p.v[j] -= lr * p.g[j];
      } else {
        for (size_t j = 0; j < p.v.size(); j++) {
          m_[i][j] = mu * m_[i][j] - lr * p.g[j];
          p.v[j] += m_[i][j];
        }
      }
    }
    return;
  }
  const double b1 = spec_.beta1, b2 = spec_.beta2;
  const double bias1 = 1.0 - std::pow(b1, t_);
  const double bias2 = 1.0 - std::pow(b2, t_);
  const double lr = spec_.lr;
  for (size_t i = 0; i < params_.size(); i++) {
    auto& p = *params_[i];
    for (size_t j = 0; j < p.v.size(); j++) {
      const double g = p.g[j];
      m_[i][j] = static_cast<float>(b1 * m_[i][j] + (1.0 - b1) * g);
      v_[i][j] = static_cast<float>(b2 * v_[i][j] + (1.0 - b2) * g * g);
      const double mh = m_[i][j] / bias1;
      const double vh = v_[i][j] / bias2;
      p.v[j] -= static_cast<float>(lr * mh / (std::sqrt(vh) + spec_.eps));
    }
  }
}

void Optimizer::zero_grad() {
  for (auto* p : params_) std::fill(p->g.begin(), p->g.end(), 0.0f);
}

OptimKind optim_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimKind::sgd;
  if (s == "adam") return OptimKind::adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

std::string to_string(OptimKind k) { return k == OptimKind::sgd ? "sgd" : "adam"; }

}  // namespace wmbench
