#pragma once

#include <memory>

#include "wmbench/nn.hpp"
#include "wmbench/tensor.hpp"

namespace wmbench {

// Minimal training surface for image-to-image nets, shared by Sequential
// stacks and nets with non-linear wiring (skip connections).
class ImageSynth {
 public:
  virtual ~ImageSynth() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;  // returns d/d(input)
  virtual std::vector<Param*> params() = 0;
  void zero_grad() {
    for (Param* p : params()) std::fill(p->g.begin(), p->g.end(), 0.0f);
  }
};

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Splits along channels into the first c_first channels and the rest.
void split_channels(const Tensor& cat, int c_first, Tensor* a, Tensor* b);

// Three-scale encoder/decoder with skip connections at the two finer scales.
// The deepest scale sees enough context to place whole-glyph structure; the
// skips keep fine detail instead of collapsing to the mean image. The output
// is deliberately linear: a sigmoid head saturates to exact float zero on
// dark-background targets and kills every gradient, so callers clamp or
// quantize to [0,1] when emitting images. Input height and width must be
// divisible by 4.
class SynthUNet : public ImageSynth {
 public:
  SynthUNet(Shape in, uint64_t seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override;

 private:
  std::unique_ptr<Conv2d> enc1_, enc2_, enc3_, mid_, dec2_, dec1_, out_;
  std::unique_ptr<ReLU> r1_, r2_, r3_, r4_, r5_, r6_;
  std::unique_ptr<Upsample2> up1_, up2_;
};

// Plain conv autoencoder (no skips) and a real-vs-fake discriminator whose
// output is P(real) in (0,1). Dims must be divisible by 4.
Sequential build_conv_autoencoder(Shape in, uint64_t seed);
Sequential build_discriminator(Shape in, uint64_t seed);

struct GanSpec {
  int epochs = 8;
  int batch_size = 64;
  double lr = 1e-3;        // generator
  double lr_disc = 1e-3;   // discriminator
  double fool_weight = 0.01;  // weight of the fool-the-discriminator term
  uint64_t seed = 1;
};

struct GanHistory {
  std::vector<double> recon_loss;  // per-epoch mean MSE
  std::vector<double> fool_loss;   // per-epoch mean BCE(D(G(x)), real)
  std::vector<double> disc_loss;   // per-epoch mean discriminator BCE
};

// Trains gen to reproduce its input while fooling disc, and disc to tell
// originals from reconstructions, in alternating steps on each minibatch.
// Generator objective per batch: MSE(G(x), x) + fool_weight * BCE(D(G(x)), 1).
GanHistory train_reconstruction_gan(ImageSynth& gen, Sequential& disc, const Tensor& images,
                                    const GanSpec& spec);

struct ReconSpec {
  int epochs = 12;
  int batch_size = 64;
  double lr = 1e-3;
  uint64_t seed = 1;
};

// Plain MSE reconstruction training (no adversary); returns per-epoch loss.
std::vector<double> train_reconstruction(Sequential& net, const Tensor& images,
                                         const ReconSpec& spec);

}  // namespace wmbench
