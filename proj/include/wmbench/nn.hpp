#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "wmbench/tensor.hpp"

namespace wmbench {

// One learnable array plus its gradient accumulator. Layers own their
// params; trainers see a flat list of pointers in a stable order (the
// checkpoint format relies on that ordering).
struct Param {
  std::vector<float> v;
  std::vector<float> g;
  std::string name;

  void init(size_t n, const std::string& nm) {
    v.assign(n, 0.0f);
    g.assign(n, 0.0f);
    name = nm;
  }
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  // Consumes the gradient w.r.t. this layer's output, accumulates parameter
  // gradients, returns the gradient w.r.t. the input of the last forward.
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual std::string kind() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

// Shared convolution kernels (im2col + GEMM). Exposed as free functions so
// layers that run the same filter bank over several inputs per step (e.g.
// passport-derived affines) can reuse them without fake layer objects.
int conv_out_dim(int in, int k, int stride, int pad);
void conv_forward(const Tensor& x, const std::vector<float>& weight, const std::vector<float>& bias,
                  int out_c, int k, int stride, int pad, Tensor& y);
void conv_backward(const Tensor& x, const Tensor& dy, const std::vector<float>& weight, int out_c,
                   int k, int stride, int pad, std::vector<float>* dweight, std::vector<float>* dbias,
                   Tensor* dx);

class Conv2d : public Layer {
 public:
  Conv2d(int in_c, int out_c, int k, int stride, int pad, uint64_t seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override { return {&weight, &bias}; }
  std::string kind() const override { return "conv2d"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

  // Exponential weighting transform on the filter bank: forward runs on
  // w * exp(theta|w|) / exp(theta * max|w|), gradients are chained back to
  // the raw weights. theta == 0 reproduces the plain path exactly.
  double ew_theta = 0.0;
  void bake_ew();

  Param weight, bias;
  int in_c, out_c, k, stride, pad;

 private:
  const std::vector<float>& effective_weight();
  Tensor last_x_;
  std::vector<float> ew_w_, ew_chain_;
};

class Dense : public Layer {
 public:
  Dense(int in_f, int out_f, uint64_t seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override { return {&weight, &bias}; }
  std::string kind() const override { return "dense"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

  double ew_theta = 0.0;
  void bake_ew();

  Param weight, bias;  // weight is (out_f x in_f) row-major
  int in_f, out_f;

 private:
  const std::vector<float>& effective_weight();
  Tensor last_x_;
  std::vector<float> ew_w_, ew_chain_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "relu"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }

 private:
  std::vector<bool> mask_;
};

class Tanh : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "tanh"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Tanh>(*this); }

 private:
  Tensor last_y_;
};

class Sigmoid : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "sigmoid"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sigmoid>(*this); }

 private:
  Tensor last_y_;
};

class MaxPool2 : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "maxpool2"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2>(*this); }

 private:
  std::vector<int> argmax_;
  int in_n_, in_c_, in_h_, in_w_;
};

class Upsample2 : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "upsample2"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Upsample2>(*this); }
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "gap"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  int in_h_ = 0, in_w_ = 0;
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::string kind() const override { return "flatten"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }

 private:
  int in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

// Residual basic block with a learnable scalar on the branch (zero at init,
// so the block starts as identity and deep stacks train without batch norm).
class ResBlock : public Layer {
 public:
  ResBlock(int in_c, int out_c, int stride, uint64_t seed);
  ResBlock(const ResBlock& o);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override;
  std::string kind() const override { return "resblock"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ResBlock>(*this); }

  std::unique_ptr<Conv2d> conv1, conv2, proj;  // proj only when shape changes
  Param branch_scale;

 private:
  std::unique_ptr<ReLU> relu_;
  Tensor branch_out_, shortcut_in_;
};

enum class PassportMode { bypass, inserted };

// Convolution whose per-channel affine either comes from learned bypass
// parameters or is derived on the fly from two fixed passport images pushed
// through the same filter bank (channel mean of the response).
class PassportConv : public Layer {
 public:
  PassportConv(int in_c, int out_c, int k, int stride, int pad, uint64_t seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override {
    return {&weight, &bias, &bypass_scale, &bypass_bias};
  }
  std::string kind() const override { return "passport_conv"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<PassportConv>(*this); }

  void set_passports(const Tensor& gamma_src, const Tensor& beta_src);
  // Input shape seen by the most recent forward; used to size passports.
  Shape last_input_shape() const { return {last_x_.c, last_x_.h, last_x_.w}; }

  PassportMode mode = PassportMode::bypass;
  Param weight, bias, bypass_scale, bypass_bias;
  Tensor passport_gamma, passport_beta;  // each (1, in_c, h, w)
  int in_c, out_c, k, stride, pad;

 private:
  Tensor last_x_, conv_x_, conv_g_, conv_b_;
  std::vector<float> gamma_, beta_;
};

class PassportBlock : public Layer {
 public:
  PassportBlock(int in_c, int out_c, int stride, uint64_t seed);
  PassportBlock(const PassportBlock& o);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override;
  std::string kind() const override { return "passport_block"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<PassportBlock>(*this); }

  std::unique_ptr<PassportConv> conv1, conv2;
  std::unique_ptr<Conv2d> proj;
  Param branch_scale;

 private:
  std::unique_ptr<ReLU> relu_;
  Tensor branch_out_, shortcut_in_;
};

class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& o);
  Sequential& operator=(const Sequential& o);
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  template <typename L, typename... Args>
  L* add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers.push_back(std::move(layer));
    return raw;
  }

  Tensor forward(const Tensor& x, bool train = false);
  Tensor backward(const Tensor& dy);
  std::vector<Param*> params();
  void zero_grad();

  std::vector<std::unique_ptr<Layer>> layers;
};

// Losses. Gradients are w.r.t. the mean loss over the batch.
struct LossGrad {
  double loss = 0.0;
  Tensor grad;
};

Tensor softmax(const Tensor& logits);
LossGrad softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
LossGrad mse_loss(const Tensor& pred, const Tensor& target);
// Binary cross entropy over already-sigmoided scores shaped (n,1,1,1).
LossGrad bce_loss(const Tensor& pred, const std::vector<float>& targets);

enum class OptimKind { sgd, adam };

struct OptimSpec {
  OptimKind kind = OptimKind::adam;
  double lr = 1e-3;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

class Optimizer {
 public:
  Optimizer(std::vector<Param*> params, OptimSpec spec);
  void step();
  void zero_grad();

 private:
  std::vector<Param*> params_;
  OptimSpec spec_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

OptimKind optim_kind_from_string(const std::string& s);
std::string to_string(OptimKind k);

}  // namespace wmbench
