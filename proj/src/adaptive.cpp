#include "wmbench/adaptive.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "wmbench/pngio.hpp"
#include "wmbench/util.hpp"

namespace wmbench {

namespace {

using nlohmann::json;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void quantize_inplace(Tensor& t) {
  for (float& v : t.data) v = quantize8(v);
}

Shape shape_of_tensor(const Tensor& t) { return Shape{t.c, t.h, t.w}; }

// Schemes whose key distribution is not anchored to task images; their
// synthesizers train on a pool the adversary fabricates instead of her
// test-set share.
bool replaces_sources(SchemeId s) {
  return s == SchemeId::abstract || s == SchemeId::passport || s == SchemeId::deepsigns;
}

Tensor fabricate_pool(SchemeId scheme, Shape shape, int n, uint64_t seed) {
  if (scheme == SchemeId::deepsigns) {
    Tensor out(n, shape.c, shape.h, shape.w);
    auto rng = make_rng(derive_seed(seed, "random_pool"));
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (float& v : out.data) v = quantize8(u(rng));
    return out;
  }
  return render_abstract_pool(shape, n, derive_seed(seed, "abstract_pool"));
}

Tensor training_sources(SchemeId scheme, const LabeledImageSet& sources, Shape shape,
                        uint64_t seed) {
  if (replaces_sources(scheme)) {
    const int n = sources.images.n > 0 ? sources.images.n : 256;
    return fabricate_pool(scheme, shape, n, seed);
  }
  if (sources.images.n == 0) throw std::invalid_argument("no source images for synthesis");
  if (shape_of_tensor(sources.images) != shape)
    throw std::invalid_argument("source shape " + sources.images.shape_str() +
                                " does not match the model input");
  return sources.images;
}

// Random short overlay strings drawn from the glyph font's alphabet. The
// length stays well inside the renderable width for 28 and 32 pixel tasks.
std::string random_overlay_text(std::mt19937& rng) {
  static const char kChars[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  std::uniform_int_distribution<int> len_d(3, 5);
  std::uniform_int_distribution<int> ch_d(0, static_cast<int>(sizeof(kChars)) - 2);
  std::string s(static_cast<size_t>(len_d(rng)), 'A');
  for (char& c : s) c = kChars[ch_d(rng)];
  return s;
}

Tensor sample_content_targets(Shape shape, int n, std::mt19937& rng) {
  Tensor batch(n, shape.c, shape.h, shape.w);
  Tensor content, mask;
  for (int i = 0; i < n; i++) {
    render_text_overlay(shape, random_overlay_text(rng), &content, &mask);
    std::copy(content.data.begin(), content.data.end(), batch.sample(i));
  }
  return batch;
}

Tensor sample_noise_targets(SchemeId scheme, Shape shape, int n, float sigma, std::mt19937& rng) {
  Tensor z(n, shape.c, shape.h, shape.w);
  if (scheme == SchemeId::noise) {
    std::normal_distribution<float> g(0.0f, sigma);
    for (float& v : z.data) v = g(rng);
    return z;
  }
  // mark: a fresh signature per sample, expanded into the same +-sigma
  // pattern its key generator stamps onto source images
  for (int i = 0; i < n; i++) {
    auto prng = make_rng(derive_seed(rng(), "mark_pattern"));
    std::uniform_int_distribution<int> bit(0, 1);
    float* px = z.sample(i);
    for (int j = 0; j < z.per_sample(); j++) px[j] = bit(prng) ? sigma : -sigma;
  }
  return z;
}

void sigmoid_inplace(Tensor& t) {
  for (float& v : t.data) v = 1.0f / (1.0f + std::exp(-v));
}

// Targeted gradient-sign step toward `target`: the adv scheme's generator
// run in reverse (descending the target-class loss instead of ascending the
// true-class loss).
Tensor targeted_gradient_keys(const ClassifierModel& model, const Tensor& x, int target,
                              float epsilon) {
  Tensor g = input_gradient(model, x, std::vector<int>(x.n, target));
  Tensor out = x;
  for (size_t j = 0; j < out.data.size(); j++) {
    const float s = g.data[j] > 0.0f ? 1.0f : (g.data[j] < 0.0f ? -1.0f : 0.0f);
    out.data[j] = clampf(out.data[j] - epsilon * s, 0.0f, 1.0f);
  }
  return out;
}

void validate_pairs(const SurrogateTriggerSet& st) {
  if (st.images.n != static_cast<int>(st.assigned_labels.size()) ||
      st.images.n != static_cast<int>(st.target_labels.size()))
    throw std::invalid_argument("surrogate set fields disagree in length");
  for (int i = 0; i < st.size(); i++)
    if (st.assigned_labels[i] == st.target_labels[i])
      throw std::invalid_argument("surrogate pair " + std::to_string(i) +
                                  " is labeled with its own target");
}

AttackMix mix_from(const SurrogateTriggerSet& st) {
  AttackMix mix;
  if (st.size() > 0) {
    mix.images = st.images;
    mix.labels = st.assigned_labels;
  }
  return mix;
}

}  // namespace

AdaptiveSynth train_synth(SchemeId scheme, const WatermarkedModel& wm,
                          const LabeledImageSet& sources, int target_label, double lambda,
                          double gamma, const SynthTrainSpec& spec) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("lambda must be finite and non-negative");
  if (!(gamma >= 0.0) || !std::isfinite(gamma))
    throw std::invalid_argument("gamma must be finite and non-negative");
  if (target_label < 0 || target_label >= wm.model.num_classes)
    throw std::invalid_argument("target label out of range");
  if (spec.epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (spec.batch_size < 1) throw std::invalid_argument("batch size must be positive");

  AdaptiveSynth s;
  s.scheme = scheme;
  s.target_label = target_label;
  s.lambda = lambda;
  s.gamma = gamma;
  s.epsilon = spec.epsilon;
  if (scheme == SchemeId::adv) return s;  // keys are gradient steps, nothing to train

  const Shape shape = wm.model.input_shape;
  const Tensor src = training_sources(scheme, sources, shape, spec.seed);

  const int n_nets = scheme == SchemeId::content ? 2 : 1;
  for (int i = 0; i < n_nets; i++)
    s.nets.push_back(std::make_unique<SynthUNet>(
        shape, derive_seed(spec.seed, "synth_net" + std::to_string(i))));
  const bool with_disc = scheme == SchemeId::exp || scheme == SchemeId::encoder;
  if (with_disc)
    s.discriminator = std::make_unique<Sequential>(
        build_discriminator(shape, derive_seed(spec.seed, "synth_disc")));

  std::vector<Param*> gen_params;
  for (auto& net : s.nets) {
    auto ps = net->params();
    gen_params.insert(gen_params.end(), ps.begin(), ps.end());
  }
  Optimizer gopt(gen_params, OptimSpec{OptimKind::adam, spec.lr});
  std::unique_ptr<Optimizer> dopt;
  if (with_disc)
    dopt = std::make_unique<Optimizer>(s.discriminator->params(),
                                       OptimSpec{OptimKind::adam, spec.lr_disc});

  // local copy so forward/backward caches never touch the caller's model
  ClassifierModel f = wm.model;
  const std::vector<int> y_t(static_cast<size_t>(spec.batch_size), target_label);

  for (int epoch = 0; epoch < spec.epochs; epoch++) {
    auto rng = make_rng(derive_seed(spec.seed, "synth_epoch" + std::to_string(epoch)));
    std::vector<int> order = shuffled_indices(src.n, rng);
    double ae_acc = 0.0, fool_acc = 0.0;
    int batches = 0;

    for (int start = 0; start < src.n; start += spec.batch_size) {
      const int bn = std::min(spec.batch_size, src.n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + bn);
      Tensor x = src.gather(idx);
      const std::vector<int> targets(y_t.begin(), y_t.begin() + bn);

      gopt.zero_grad();
      double l_ae = 0.0, l_fool = 0.0;

      if (scheme == SchemeId::content) {
        Tensor c_target = sample_content_targets(shape, bn, rng);
        Tensor c_out = s.nets[0]->forward(x, true);
        Tensor m_out = s.nets[1]->forward(x, true);
        sigmoid_inplace(m_out);

        Tensor xp = Tensor::zeros_like(x);
        for (size_t j = 0; j < xp.data.size(); j++)
          xp.data[j] = (1.0f - m_out.data[j]) * x.data[j] + m_out.data[j] * c_out.data[j];

        f.net.zero_grad();
        Tensor logits = f.net.forward(xp, true);
        LossGrad ce = softmax_cross_entropy(logits, targets);
        Tensor gx = f.net.backward(ce.grad);

        LossGrad mse = mse_loss(c_out, c_target);
        double mask_mass = 0.0;
        for (float v : m_out.data) mask_mass += v;
        mask_mass /= m_out.data.size();
        l_ae = mse.loss + gamma * mask_mass;
        l_fool = ce.loss;

        Tensor d_c = mse.grad;
        Tensor d_m = Tensor::zeros_like(m_out);
        const float mass_g = static_cast<float>(gamma / m_out.data.size());
        for (size_t j = 0; j < d_c.data.size(); j++) {
          const float gxl = static_cast<float>(lambda) * gx.data[j];
          d_c.data[j] += gxl * m_out.data[j];
          const float dm = gxl * (c_out.data[j] - x.data[j]) + mass_g;
          d_m.data[j] = dm * m_out.data[j] * (1.0f - m_out.data[j]);  // through the sigmoid
        }
        s.nets[0]->backward(d_c);
        s.nets[1]->backward(d_m);
      } else if (scheme == SchemeId::noise || scheme == SchemeId::mark) {
        Tensor z_target = sample_noise_targets(scheme, shape, bn, spec.noise_sigma, rng);
        Tensor z_out = s.nets[0]->forward(x, true);
        Tensor xp = x;
        for (size_t j = 0; j < xp.data.size(); j++) xp.data[j] += z_out.data[j];

        f.net.zero_grad();
        Tensor logits = f.net.forward(xp, true);
        LossGrad ce = softmax_cross_entropy(logits, targets);
        Tensor gx = f.net.backward(ce.grad);

        LossGrad mse = mse_loss(z_out, z_target);
        l_ae = mse.loss;
        l_fool = ce.loss;
        for (size_t j = 0; j < mse.grad.data.size(); j++)
          mse.grad.data[j] += static_cast<float>(lambda) * gx.data[j];
        s.nets[0]->backward(mse.grad);
      } else {
        Tensor xp = s.nets[0]->forward(x, true);

        f.net.zero_grad();
        Tensor logits = f.net.forward(xp, true);
        LossGrad ce = softmax_cross_entropy(logits, targets);
        Tensor gx = f.net.backward(ce.grad);

        LossGrad mse = mse_loss(xp, x);
        l_ae = mse.loss;
        l_fool = ce.loss;
        Tensor d_xp = mse.grad;

        if (with_disc) {
          Tensor p_fake = s.discriminator->forward(xp, true);
          LossGrad fool = bce_loss(p_fake, std::vector<float>(bn, 1.0f));
          Tensor d_from_disc = s.discriminator->backward(fool.grad);
          l_ae += gamma * fool.loss;
          for (size_t j = 0; j < d_xp.data.size(); j++)
            d_xp.data[j] += static_cast<float>(gamma) * d_from_disc.data[j];
        }
        for (size_t j = 0; j < d_xp.data.size(); j++)
          d_xp.data[j] += static_cast<float>(lambda) * gx.data[j];
        s.nets[0]->backward(d_xp);

        if (with_disc) {
          // discriminator's own objective, after the generator has stepped
          // off this batch's caches
          gopt.step();
          s.discriminator->zero_grad();
          Tensor p_real = s.discriminator->forward(x, true);
          LossGrad d_real = bce_loss(p_real, std::vector<float>(bn, 1.0f));
          s.discriminator->backward(d_real.grad);
          Tensor fake_again = s.nets[0]->forward(x, false);
          Tensor p_fake2 = s.discriminator->forward(fake_again, true);
          LossGrad d_fake = bce_loss(p_fake2, std::vector<float>(bn, 0.0f));
          s.discriminator->backward(d_fake.grad);
          dopt->step();
        }
      }
      if (!with_disc) gopt.step();

      ae_acc += l_ae;
      fool_acc += l_fool;
      batches++;
    }

    const double mean_ae = ae_acc / std::max(1, batches);
    const double mean_fool = fool_acc / std::max(1, batches);
    s.loss_ae.push_back(mean_ae);
    s.loss_fool.push_back(mean_fool);
    s.loss_total.push_back(mean_ae + lambda * mean_fool);
    if (!std::isfinite(s.loss_total.back()))
      throw std::runtime_error("synthesis diverged (non-finite loss)");
  }
  return s;
}

Tensor synth_keys(AdaptiveSynth& synth, const ClassifierModel& model, const Tensor& sources) {
  if (sources.n == 0) throw std::invalid_argument("no sources to synthesize from");
  switch (synth.scheme) {
    case SchemeId::adv:
      return targeted_gradient_keys(model, sources, synth.target_label, synth.epsilon);
    case SchemeId::content: {
      Tensor c_out = synth.nets[0]->forward(sources, false);
      Tensor m_out = synth.nets[1]->forward(sources, false);
      sigmoid_inplace(m_out);
      return superimpose(sources, c_out, m_out);
    }
    case SchemeId::noise:
    case SchemeId::mark: {
      Tensor z = synth.nets[0]->forward(sources, false);
      Tensor out = sources;
      for (size_t j = 0; j < out.data.size(); j++) out.data[j] += z.data[j];
      return out;
    }
    default:
      return synth.nets[0]->forward(sources, false);
  }
}

double fooling_rate(AdaptiveSynth& synth, const ClassifierModel& model, const Tensor& sources) {
  Tensor keys = synth_keys(synth, model, sources);
  for (float& v : keys.data) v = clampf(v, 0.0f, 1.0f);
  std::vector<int> pred = model.predict(keys);
  int hits = 0;
  for (int p : pred)
    if (p == synth.target_label) hits++;
  return static_cast<double>(hits) / pred.size();
}

SurrogateTriggerSet synth_trigger_pairs(const WatermarkedModel& wm, SchemeId scheme,
                                        const LabeledImageSet& sources, double lambda,
                                        double gamma, const SynthTrainSpec& spec,
                                        uint64_t label_seed) {
  const int K = wm.model.num_classes;
  const Shape shape = wm.model.input_shape;

  SurrogateTriggerSet st;
  st.scheme = scheme;
  st.meta = {{"lambda", lambda},
             {"gamma", gamma},
             {"epochs", spec.epochs},
             {"keys_per_class", spec.keys_per_class},
             {"num_classes", K}};
  json fool_rates = json::array();
  json mask_masses = json::array();

  auto label_rng = make_rng(derive_seed(label_seed, "assigned_labels"));
  std::uniform_int_distribution<int> other(0, K - 2);

  for (int yt = 0; yt < K; yt++) {
    SynthTrainSpec cs = spec;
    cs.seed = derive_seed(spec.seed, "class" + std::to_string(yt));
    AdaptiveSynth synth = train_synth(scheme, wm, sources, yt, lambda, gamma, cs);

    // collect from the same pool the synth trained on, capped per class
    Tensor pool = training_sources(scheme, sources, shape, cs.seed);
    int take = spec.keys_per_class > 0 ? std::min(spec.keys_per_class, pool.n) : pool.n;
    auto pick_rng = make_rng(derive_seed(cs.seed, "collect"));
    std::vector<int> order = shuffled_indices(pool.n, pick_rng);
    order.resize(take);
    Tensor x = pool.gather(order);

    Tensor keys = synth_keys(synth, wm.model, x);
    quantize_inplace(keys);

    if (scheme == SchemeId::content) {
      Tensor m_out = synth.nets[1]->forward(x, false);
      sigmoid_inplace(m_out);
      double mass = 0.0;
      for (float v : m_out.data) mass += v;
      mask_masses.push_back(mass / m_out.data.size());
    }
    fool_rates.push_back(fooling_rate(synth, wm.model, x));

    st.source_images = st.source_images.n == 0 ? x : Tensor::concat(st.source_images, x);
    st.images = st.images.n == 0 ? keys : Tensor::concat(st.images, keys);
    for (int i = 0; i < take; i++) {
      st.target_labels.push_back(yt);
      int l = other(label_rng);
      if (l >= yt) l++;
      st.assigned_labels.push_back(l);
    }
  }

  st.meta["fooling_rate"] = fool_rates;
  if (!mask_masses.empty()) st.meta["mask_mass"] = mask_masses;
  return st;
}

AttackOutcome adaptive_finetune(const WatermarkedModel& wm, const LabeledImageSet& adv_data,
                                const LabeledImageSet& surrogate,
                                const LabeledImageSet& eval_test, const SurrogateTriggerSet& st,
                                const TrainSpec& spec) {
  validate_pairs(st);
  AttackOutcome out = finetune_attack(wm, adv_data, surrogate, eval_test, spec, mix_from(st));
  out.attack_id = "adaptive_finetune";
  out.attacked_model.removal_tag = out.attack_id;
  out.params["surrogate_keys"] = st.size();
  out.params["surrogate_scheme"] = to_string(st.scheme);
  return out;
}

AttackOutcome adaptive_steal(const WatermarkedModel& wm, const LabeledImageSet& surrogate,
                             const LabeledImageSet& adv_data, const LabeledImageSet& eval_test,
                             const SurrogateTriggerSet& st, Arch arch, const TrainSpec& spec) {
  validate_pairs(st);
  AttackOutcome out = steal_attack(wm, surrogate, adv_data, eval_test, arch, spec, mix_from(st));
  out.attack_id = "adaptive_steal";
  out.attacked_model.removal_tag = out.attack_id;
  out.params["surrogate_keys"] = st.size();
  out.params["surrogate_scheme"] = to_string(st.scheme);
  return out;
}

namespace {

struct DenseActivations {
  std::vector<const Dense*> layers;
  std::vector<Tensor> acts;
};

// Runs the net once, recording each fully connected layer's output. With
// post_activation the probe moves past an immediately following ReLU.
DenseActivations dense_activations(Sequential& net, const Tensor& x, bool post_activation) {
  DenseActivations out;
  Tensor h = x;
  for (size_t li = 0; li < net.layers.size(); li++) {
    Layer* l = net.layers[li].get();
    h = l->forward(h, false);
    if (auto* d = dynamic_cast<Dense*>(l)) {
      Tensor probe = h;
      if (post_activation && li + 1 < net.layers.size() &&
          dynamic_cast<ReLU*>(net.layers[li + 1].get()) != nullptr)
        probe = net.layers[li + 1]->forward(h, false);
      out.layers.push_back(d);
      out.acts.push_back(std::move(probe));
    }
  }
  return out;
}

}  // namespace

AttackOutcome adaptive_prune(const WatermarkedModel& wm, const LabeledImageSet& eval_test,
                             const SurrogateTriggerSet& st, int percent, bool post_activation) {
  if (percent < 0 || percent > 100)
    throw std::invalid_argument("prune percent must lie in [0,100]");
  if (st.size() == 0) throw std::invalid_argument("activation contrast needs surrogate pairs");
  if (st.source_images.n != st.images.n)
    throw std::invalid_argument("surrogate pairs must align sources with keys");

  const auto t0 = std::chrono::steady_clock::now();
  AttackOutcome out;
  out.attack_id = "adaptive_prune";
  {
    ClassifierModel probe = wm.model;
    out.owner_recall_before = trigger_recall(probe, wm.trigger);
    out.test_acc_before = evaluate_accuracy(probe, eval_test.images, eval_test.labels);
  }

  out.attacked_model = wm.model;
  DenseActivations on_src =
      dense_activations(out.attacked_model.net, st.source_images, post_activation);
  DenseActivations on_keys = dense_activations(out.attacked_model.net, st.images, post_activation);

  // per-neuron contrast score per dense layer
  std::vector<std::vector<double>> neuron_scores(on_src.layers.size());
  for (size_t d = 0; d < on_src.layers.size(); d++) {
    const Tensor& a = on_src.acts[d];
    const Tensor& b = on_keys.acts[d];
    const int width = a.per_sample();
    neuron_scores[d].assign(width, 0.0);
    for (int s = 0; s < a.n; s++) {
      const float* ra = a.sample(s);
      const float* rb = b.sample(s);
      for (int j = 0; j < width; j++) neuron_scores[d][j] += std::abs(ra[j] - rb[j]);
    }
    for (double& v : neuron_scores[d]) v /= a.n;
  }

  std::vector<Param*> fc = out.attacked_model.fc_weight_params();
  long long total = 0;
  for (Param* p : fc) total += static_cast<long long>(p->v.size());
  const long long k = (static_cast<long long>(percent) * total + 99) / 100;

  struct Entry {
    double score;
    int pi;
    int idx;
  };
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(total));
  for (int pi = 0; pi < static_cast<int>(fc.size()); pi++) {
    // locate the dense layer owning this weight to read its neuron scores
    int owner = -1;
    for (size_t d = 0; d < on_src.layers.size(); d++)
      if (&on_src.layers[d]->weight == fc[pi]) owner = static_cast<int>(d);
    if (owner < 0) throw std::logic_error("fc weight without a probed dense layer");
    const Dense* dl = on_src.layers[owner];
    for (int i = 0; i < static_cast<int>(fc[pi]->v.size()); i++) {
      const int neuron = i / dl->in_f;  // weight rows follow output neurons
      entries.push_back({neuron_scores[owner][neuron], pi, i});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;  // most-contrasted first
    if (a.pi != b.pi) return a.pi < b.pi;
    return a.idx < b.idx;
  });
  for (long long i = 0; i < k; i++) fc[entries[i].pi]->v[entries[i].idx] = 0.0f;

  out.attacked_model.removal_tag = out.attack_id;
  out.owner_recall_after = trigger_recall(out.attacked_model, wm.trigger);
  out.test_acc_after = evaluate_accuracy(out.attacked_model, eval_test.images, eval_test.labels);
  out.params = {{"percent", percent},
                {"zeroed", k},
                {"fc_weights", total},
                {"post_activation", post_activation},
                {"pairs", st.size()}};
  out.runtime_s = seconds_since(t0);
  return out;
}

AttackOutcome adaptive_prune_sweep(const WatermarkedModel& wm, const LabeledImageSet& eval_test,
                                   const SurrogateTriggerSet& st,
                                   const std::vector<int>& percents, double max_acc_drop) {
  if (percents.empty()) throw std::invalid_argument("prune sweep needs at least one percent");
  const auto t0 = std::chrono::steady_clock::now();

  AttackOutcome best;
  bool have_valid = false;
  for (int p : percents) {
    AttackOutcome o = adaptive_prune(wm, eval_test, st, p);
    const bool ok = o.test_acc_after - o.test_acc_before >= -max_acc_drop - 1e-12;
    if (ok) {
      if (!have_valid || o.owner_recall_after < best.owner_recall_after) best = std::move(o);
      have_valid = true;
    } else if (!have_valid) {
      if (best.attack_id.empty() || o.test_acc_after > best.test_acc_after) best = std::move(o);
    }
  }
  best.params["swept_percents"] = percents;
  best.params["max_acc_drop"] = max_acc_drop;
  best.runtime_s = seconds_since(t0);
  return best;
}

void save_surrogate_set(const SurrogateTriggerSet& st, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "keys");
  fs::create_directories(dir / "sources");

  char name[32];
  for (int i = 0; i < st.size(); i++) {
    std::snprintf(name, sizeof(name), "%04d.png", i);
    write_png(dir / "keys" / name, st.images, i);
    if (st.source_images.n == st.images.n) write_png(dir / "sources" / name, st.source_images, i);
  }

  auto write_csv = [&](const char* file, const char* col, const std::vector<int>& vals) {
    std::ofstream csv(dir / file);
    if (!csv) throw std::runtime_error("cannot write " + (dir / file).string());
    csv << "idx," << col << "\n";
    for (int i = 0; i < st.size(); i++) csv << i << "," << vals[i] << "\n";
  };
  // labels.csv mirrors the trigger archive reading: the label the set trains
  // with. The explicit companions make the pair structure unambiguous.
  write_csv("labels.csv", "target_label", st.assigned_labels);
  write_csv("assigned_labels.csv", "assigned_label", st.assigned_labels);
  write_csv("y_t.csv", "y_t", st.target_labels);

  json meta{{"scheme", to_string(st.scheme)},
            {"num_keys", st.size()},
            {"shape", {{"c", st.images.c}, {"h", st.images.h}, {"w", st.images.w}}},
            {"meta", st.meta}};
  std::ofstream mj(dir / "meta.json");
  if (!mj) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
  mj << meta.dump(2) << "\n";
}

SurrogateTriggerSet load_surrogate_set(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mj(dir / "meta.json");
  if (!mj) throw std::runtime_error("cannot open " + (dir / "meta.json").string());
  json meta = json::parse(mj);

  SurrogateTriggerSet st;
  st.scheme = scheme_from_string(meta.at("scheme").get<std::string>());
  st.meta = meta.value("meta", json::object());
  const int n = meta.at("num_keys").get<int>();
  const int c = meta.at("shape").at("c").get<int>();
  const int h = meta.at("shape").at("h").get<int>();
  const int w = meta.at("shape").at("w").get<int>();

  auto read_csv = [&](const char* file) {
    std::ifstream csv(dir / file);
    if (!csv) throw std::runtime_error("cannot open " + (dir / file).string());
    std::string line;
    std::getline(csv, line);
    std::vector<int> vals(n, 0);
    std::vector<bool> seen(n, false);
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos)
        throw std::runtime_error(std::string("bad csv row in ") + file + ": " + line);
      const int idx = std::stoi(line.substr(0, comma));
      if (idx < 0 || idx >= n) throw std::runtime_error(std::string(file) + " index out of range");
      vals[idx] = std::stoi(line.substr(comma + 1));
      seen[idx] = true;
    }
    for (int i = 0; i < n; i++)
      if (!seen[i]) throw std::runtime_error(std::string(file) + " missing index " + std::to_string(i));
    return vals;
  };
  st.assigned_labels = read_csv("assigned_labels.csv");
  st.target_labels = read_csv("y_t.csv");

  auto read_images = [&](const char* sub, Tensor* into) {
    *into = Tensor(n, c, h, w);
    char name[32];
    for (int i = 0; i < n; i++) {
      std::snprintf(name, sizeof(name), "%04d.png", i);
      Tensor img = read_png(dir / sub / name);
      if (img.c != c || img.h != h || img.w != w)
        throw std::runtime_error(std::string("image shape mismatch: ") + sub + "/" + name);
      std::copy(img.data.begin(), img.data.end(), into->sample(i));
    }
  };
  read_images("keys", &st.images);
  if (fs::exists(dir / "sources")) read_images("sources", &st.source_images);
  return st;
}

}  // namespace wmbench
