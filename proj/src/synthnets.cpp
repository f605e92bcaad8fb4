#include "wmbench/synthnets.hpp"

#include <stdexcept>

#include "wmbench/util.hpp"

namespace wmbench {

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    throw std::invalid_argument("concat_channels: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.n, a.c + b.c, a.h, a.w);
  const int plane = a.h * a.w;
  for (int s = 0; s < a.n; s++) {
    std::copy(a.sample(s), a.sample(s) + a.c * plane, out.sample(s));
    std::copy(b.sample(s), b.sample(s) + b.c * plane, out.sample(s) + a.c * plane);
  }
  return out;
}

void split_channels(const Tensor& cat, int c_first, Tensor* a, Tensor* b) {
  if (c_first <= 0 || c_first >= cat.c)
    throw std::invalid_argument("split_channels: bad split point");
  *a = Tensor(cat.n, c_first, cat.h, cat.w);
  *b = Tensor(cat.n, cat.c - c_first, cat.h, cat.w);
  const int plane = cat.h * cat.w;
  for (int s = 0; s < cat.n; s++) {
    std::copy(cat.sample(s), cat.sample(s) + c_first * plane, a->sample(s));
    std::copy(cat.sample(s) + c_first * plane, cat.sample(s) + cat.c * plane, b->sample(s));
  }
}

SynthUNet::SynthUNet(Shape in, uint64_t seed) {
  if (in.h % 4 != 0 || in.w % 4 != 0)
    throw std::invalid_argument("SynthUNet: dims must be divisible by 4");
  enc1_ = std::make_unique<Conv2d>(in.c, 16, 3, 1, 1, derive_seed(seed, "enc1"));
  enc2_ = std::make_unique<Conv2d>(16, 32, 3, 2, 1, derive_seed(seed, "enc2"));
  enc3_ = std::make_unique<Conv2d>(32, 64, 3, 2, 1, derive_seed(seed, "enc3"));
  mid_ = std::make_unique<Conv2d>(64, 64, 3, 1, 1, derive_seed(seed, "mid"));
  dec2_ = std::make_unique<Conv2d>(96, 32, 3, 1, 1, derive_seed(seed, "dec2"));
  dec1_ = std::make_unique<Conv2d>(48, 16, 3, 1, 1, derive_seed(seed, "dec1"));
  out_ = std::make_unique<Conv2d>(16, in.c, 3, 1, 1, derive_seed(seed, "out"));
  r1_ = std::make_unique<ReLU>();
  r2_ = std::make_unique<ReLU>();
  r3_ = std::make_unique<ReLU>();
  r4_ = std::make_unique<ReLU>();
  r5_ = std::make_unique<ReLU>();
  r6_ = std::make_unique<ReLU>();
  up1_ = std::make_unique<Upsample2>();
  up2_ = std::make_unique<Upsample2>();
}

Tensor SynthUNet::forward(const Tensor& x, bool train) {
  Tensor a = r1_->forward(enc1_->forward(x, train), train);      // (n,16,h,w)
  Tensor b = r2_->forward(enc2_->forward(a, train), train);      // (n,32,h/2,w/2)
  Tensor c = r3_->forward(enc3_->forward(b, train), train);      // (n,64,h/4,w/4)
  Tensor m = r4_->forward(mid_->forward(c, train), train);       // (n,64,h/4,w/4)
  Tensor cat2 = concat_channels(up2_->forward(m, train), b);     // (n,96,h/2,w/2)
  Tensor d2 = r5_->forward(dec2_->forward(cat2, train), train);  // (n,32,h/2,w/2)
  Tensor cat1 = concat_channels(up1_->forward(d2, train), a);    // (n,48,h,w)
  Tensor d1 = r6_->forward(dec1_->forward(cat1, train), train);  // (n,16,h,w)
  return out_->forward(d1, train);
}

Tensor SynthUNet::backward(const Tensor& dy) {
  Tensor g = out_->backward(dy);
  Tensor dcat1 = dec1_->backward(r6_->backward(g));
  Tensor du1, da_skip;
  split_channels(dcat1, 32, &du1, &da_skip);
  Tensor dcat2 = dec2_->backward(r5_->backward(up1_->backward(du1)));
  Tensor du2, db_skip;
  split_channels(dcat2, 64, &du2, &db_skip);
  Tensor db = enc3_->backward(r3_->backward(mid_->backward(r4_->backward(up2_->backward(du2)))));
  // Each skip feeds an encoder output straight into the decoder, so its
  // gradient joins the path coming back through the deeper branch.
  for (size_t i = 0; i < db.data.size(); i++) db.data[i] += db_skip.data[i];
  Tensor da = enc2_->backward(r2_->backward(db));
  for (size_t i = 0; i < da.data.size(); i++) da.data[i] += da_skip.data[i];
  return enc1_->backward(r1_->backward(da));
}

std::vector<Param*> SynthUNet::params() {
  std::vector<Param*> out;
  for (Conv2d* c : {enc1_.get(), enc2_.get(), enc3_.get(), mid_.get(), dec2_.get(), dec1_.get(),
                    out_.get()})
    for (Param* p : c->params()) out.push_back(p);
  return out;
}

Sequential build_conv_autoencoder(Shape in, uint64_t seed) {
  if (in.h % 4 != 0 || in.w % 4 != 0)
    throw std::invalid_argument("autoencoder: dims must be divisible by 4");
  Sequential net;
  net.add<Conv2d>(in.c, 16, 3, 1, 1, derive_seed(seed, "ae0"));
  net.add<ReLU>();
  net.add<Conv2d>(16, 32, 3, 2, 1, derive_seed(seed, "ae1"));
  net.add<ReLU>();
  net.add<Conv2d>(32, 32, 3, 2, 1, derive_seed(seed, "ae2"));
  net.add<ReLU>();
  net.add<Conv2d>(32, 32, 3, 1, 1, derive_seed(seed, "ae3"));
  net.add<ReLU>();
  net.add<Upsample2>();
  net.add<Conv2d>(32, 16, 3, 1, 1, derive_seed(seed, "ae4"));
  net.add<ReLU>();
  net.add<Upsample2>();
  net.add<Conv2d>(16, 16, 3, 1, 1, derive_seed(seed, "ae5"));
  net.add<ReLU>();
  net.add<Conv2d>(16, in.c, 3, 1, 1, derive_seed(seed, "ae6"));
  return net;
}

Sequential build_discriminator(Shape in, uint64_t seed) {
  Sequential net;
  net.add<Conv2d>(in.c, 16, 3, 2, 1, derive_seed(seed, "d0"));
  net.add<ReLU>();
  net.add<Conv2d>(16, 32, 3, 2, 1, derive_seed(seed, "d1"));
  net.add<ReLU>();
  net.add<GlobalAvgPool>();
  net.add<Flatten>();
  net.add<Dense>(32, 1, derive_seed(seed, "d2"));
  net.add<Sigmoid>();
  return net;
}

GanHistory train_reconstruction_gan(ImageSynth& gen, Sequential& disc, const Tensor& images,
                                    const GanSpec& spec) {
  if (images.n == 0) throw std::invalid_argument("train_reconstruction_gan: no images");
  if (images.h % 4 != 0 || images.w % 4 != 0)
    throw std::invalid_argument("train_reconstruction_gan: dims must be divisible by 4");

  OptimSpec gspec{OptimKind::adam, spec.lr};
  OptimSpec dspec{OptimKind::adam, spec.lr_disc};
  Optimizer gopt(gen.params(), gspec);
  Optimizer dopt(disc.params(), dspec);

  GanHistory hist;
  for (int epoch = 0; epoch < spec.epochs; epoch++) {
    auto rng = make_rng(derive_seed(spec.seed, "gan_epoch" + std::to_string(epoch)));
    std::vector<int> order = shuffled_indices(images.n, rng);
    double recon_acc = 0.0, fool_acc = 0.0, disc_acc = 0.0;
    int batches = 0;

    for (int start = 0; start < images.n; start += spec.batch_size) {
      const int bn = std::min(spec.batch_size, images.n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + bn);
      Tensor x = images.gather(idx);

      // Generator step: reconstruct and fool. The discriminator's params
      // pick up gradients from the fool term's backward pass; they are
      // cleared before the discriminator trains on its own objective.
      gen.zero_grad();
      Tensor recon = gen.forward(x, true);
      LossGrad mse = mse_loss(recon, x);
      Tensor p_fake = disc.forward(recon, true);
      LossGrad fool = bce_loss(p_fake, std::vector<float>(bn, 1.0f));
      Tensor d_recon = disc.backward(fool.grad);
      for (size_t i = 0; i < mse.grad.data.size(); i++)
        mse.grad.data[i] += static_cast<float>(spec.fool_weight) * d_recon.data[i];
      gen.backward(mse.grad);
      gopt.step();

      // Discriminator step: real -> 1, reconstruction -> 0. The second
      // forward invalidates the first pass's caches, so each half runs
      // forward+backward before the next.
      disc.zero_grad();
      Tensor p_real = disc.forward(x, true);
      LossGrad d_real = bce_loss(p_real, std::vector<float>(bn, 1.0f));
      disc.backward(d_real.grad);
      Tensor p_fake2 = disc.forward(recon, true);
      LossGrad d_fake = bce_loss(p_fake2, std::vector<float>(bn, 0.0f));
      disc.backward(d_fake.grad);
      dopt.step();

      recon_acc += mse.loss;
      fool_acc += fool.loss;
      disc_acc += d_real.loss + d_fake.loss;
      batches++;
    }
    hist.recon_loss.push_back(recon_acc / batches);
    hist.fool_loss.push_back(fool_acc / batches);
    hist.disc_loss.push_back(disc_acc / batches);
  }
  return hist;
}

std::vector<double> train_reconstruction(Sequential& net, const Tensor& images,
                                         const ReconSpec& spec) {
  if (images.n == 0) throw std::invalid_argument("train_reconstruction: no images");
  OptimSpec ospec{OptimKind::adam, spec.lr};
  Optimizer opt(net.params(), ospec);
  std::vector<double> hist;
  for (int epoch = 0; epoch < spec.epochs; epoch++) {
    auto rng = make_rng(derive_seed(spec.seed, "recon_epoch" + std::to_string(epoch)));
    std::vector<int> order = shuffled_indices(images.n, rng);
    double acc = 0.0;
    int batches = 0;
    for (int start = 0; start < images.n; start += spec.batch_size) {
      const int bn = std::min(spec.batch_size, images.n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + bn);
      Tensor x = images.gather(idx);
      net.zero_grad();
      Tensor recon = net.forward(x, true);
      LossGrad mse = mse_loss(recon, x);
      net.backward(mse.grad);
      opt.step();
      acc += mse.loss;
      batches++;
    }
    hist.push_back(acc / batches);
  }
  return hist;
}

}  // namespace wmbench
