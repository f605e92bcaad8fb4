#include "wmbench/schemes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "wmbench/pngio.hpp"
#include "wmbench/synthnets.hpp"
#include "wmbench/util.hpp"

namespace wmbench {

namespace {

using json = nlohmann::json;

// 3x5 glyphs, one row per byte, bit 2 = leftmost column.
struct Glyph {
  char ch;
  uint8_t rows[5];
};
constexpr Glyph kFont[] = {
    {'A', {2, 5, 7, 5, 5}}, {'B', {6, 5, 6, 5, 6}}, {'C', {3, 4, 4, 4, 3}},
    {'D', {6, 5, 5, 5, 6}}, {'E', {7, 4, 6, 4, 7}}, {'F', {7, 4, 6, 4, 4}},
    {'G', {3, 4, 5, 5, 3}}, {'H', {5, 5, 7, 5, 5}}, {'I', {7, 2, 2, 2, 7}},
    {'J', {1, 1, 1, 5, 2}}, {'K', {5, 5, 6, 5, 5}}, {'L', {4, 4, 4, 4, 7}},
    {'M', {5, 7, 7, 5, 5}}, {'N', {6, 5, 5, 5, 5}}, {'O', {2, 5, 5, 5, 2}},
    {'P', {6, 5, 6, 4, 4}}, {'Q', {2, 5, 5, 3, 1}}, {'R', {6, 5, 6, 5, 5}},
    {'S', {3, 4, 2, 1, 6}}, {'T', {7, 2, 2, 2, 2}}, {'U', {5, 5, 5, 5, 7}},
    {'V', {5, 5, 5, 5, 2}}, {'W', {5, 5, 7, 7, 5}}, {'X', {5, 5, 2, 5, 5}},
    {'Y', {5, 5, 2, 2, 2}}, {'Z', {7, 1, 2, 4, 7}}, {'0', {7, 5, 5, 5, 7}},
    {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}},
    {'7', {7, 1, 1, 1, 1}}, {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}},
};

const Glyph* find_glyph(char c) {
  for (const auto& g : kFont)
    if (g.ch == c) return &g;
  return nullptr;
}

int pick_label_excluding(std::mt19937& rng, int num_classes, int forbidden) {
  std::uniform_int_distribution<int> dist(0, num_classes - 1);
  for (;;) {
    int l = dist(rng);
    if (l != forbidden) return l;
  }
}

// Indices of n source images of one class, without replacement while the
// class pool lasts, with replacement after.
std::vector<int> sample_class_indices(const LabeledImageSet& set, int cls, int n,
                                      std::mt19937& rng) {
  std::vector<int> pool;
  for (int i = 0; i < static_cast<int>(set.labels.size()); i++)
    if (set.labels[i] == cls) pool.push_back(i);
  if (pool.empty())
    throw std::invalid_argument("no source images of class " + std::to_string(cls));
  std::vector<int> out;
  out.reserve(n);
  if (static_cast<int>(pool.size()) >= n) {
    std::vector<int> perm = shuffled_indices(static_cast<int>(pool.size()), rng);
    for (int i = 0; i < n; i++) out.push_back(pool[perm[i]]);
  } else {
    std::uniform_int_distribution<int> dist(0, static_cast<int>(pool.size()) - 1);
    for (int i = 0; i < n; i++) out.push_back(pool[dist(rng)]);
  }
  return out;
}

std::vector<int> sample_any_indices(int total, int n, std::mt19937& rng) {
  if (total <= 0) throw std::invalid_argument("empty source set");
  std::vector<int> out;
  out.reserve(n);
  if (total >= n) {
    std::vector<int> perm = shuffled_indices(total, rng);
    out.assign(perm.begin(), perm.begin() + n);
  } else {
    std::uniform_int_distribution<int> dist(0, total - 1);
    for (int i = 0; i < n; i++) out.push_back(dist(rng));
  }
  return out;
}

void quantize_tensor(Tensor& t) {
  for (float& v : t.data) v = quantize8(v);
}

int resolve_source_class(const TriggerGenParams& p, int num_classes, std::mt19937& rng) {
  if (p.source_class >= 0) {
    if (p.source_class >= num_classes)
      throw std::invalid_argument("source_class out of range");
    return p.source_class;
  }
  std::uniform_int_distribution<int> dist(0, num_classes - 1);
  return dist(rng);
}

int resolve_target_label(const TriggerGenParams& p, int num_classes, int forbidden,
                         std::mt19937& rng) {
  if (p.target_label >= 0) {
    if (p.target_label >= num_classes)
      throw std::invalid_argument("target_label out of range");
    if (p.target_label == forbidden)
      throw std::invalid_argument("target_label must differ from the source class");
    return p.target_label;
  }
  return pick_label_excluding(rng, num_classes, forbidden);
}

}  // namespace

SchemeId scheme_from_string(const std::string& s) {
  for (SchemeId id : all_schemes())
    if (to_string(id) == s) return id;
  throw std::invalid_argument("unknown scheme: " + s);
}

std::string to_string(SchemeId s) {
  switch (s) {
    case SchemeId::content: return "content";
    case SchemeId::noise: return "noise";
    case SchemeId::unrelated: return "unrelated";
    case SchemeId::mark: return "mark";
    case SchemeId::abstract: return "abstract";
    case SchemeId::adv: return "adv";
    case SchemeId::passport: return "passport";
    case SchemeId::encoder: return "encoder";
    case SchemeId::exp: return "exp";
    case SchemeId::deepsigns: return "deepsigns";
  }
  throw std::invalid_argument("bad scheme id");
}

const std::vector<SchemeId>& all_schemes() {
  static const std::vector<SchemeId> ids = {
      SchemeId::content, SchemeId::noise,    SchemeId::unrelated, SchemeId::mark,
      SchemeId::abstract, SchemeId::adv,     SchemeId::passport,  SchemeId::encoder,
      SchemeId::exp,      SchemeId::deepsigns};
  return ids;
}

bool scheme_embeds_from_scratch(SchemeId s) {
  switch (s) {
    case SchemeId::content:
    case SchemeId::noise:
    case SchemeId::unrelated:
    case SchemeId::abstract:
    case SchemeId::deepsigns:
    case SchemeId::encoder:
    case SchemeId::passport:
      return true;
    case SchemeId::mark:
    case SchemeId::adv:
    case SchemeId::exp:
      return false;
  }
  throw std::invalid_argument("bad scheme id");
}

Tensor superimpose(const Tensor& x, const Tensor& content, const Tensor& mask) {
  auto broadcast_ok = [&](const Tensor& t) {
    return t.c == x.c && t.h == x.h && t.w == x.w && (t.n == 1 || t.n == x.n);
  };
  if (!broadcast_ok(content) || !broadcast_ok(mask))
    throw std::invalid_argument("superimpose: shape mismatch x=" + x.shape_str() +
                                " content=" + content.shape_str() + " mask=" + mask.shape_str());
  Tensor out = Tensor::zeros_like(x);
  const int ps = x.per_sample();
  for (int s = 0; s < x.n; s++) {
    const float* xs = x.sample(s);
    const float* cs = content.sample(content.n == 1 ? 0 : s);
    const float* ms = mask.sample(mask.n == 1 ? 0 : s);
    float* os = out.sample(s);
    for (int i = 0; i < ps; i++) os[i] = (1.0f - ms[i]) * xs[i] + ms[i] * cs[i];
  }
  return out;
}

void render_text_overlay(Shape shape, const std::string& text, Tensor* content, Tensor* mask) {
  if (text.empty()) throw std::invalid_argument("text overlay: empty text");
  const int margin = 2;
  const int width = static_cast<int>(text.size()) * 4 - 1;  // 3 cols + 1 gap per glyph
  const int height = 5;
  if (width > shape.w - 2 * margin || height > shape.h - 2 * margin)
    throw std::invalid_argument("text overlay does not fit: \"" + text + "\" on " + shape.str());

  *content = Tensor(1, shape.c, shape.h, shape.w);
  *mask = Tensor(1, shape.c, shape.h, shape.w);
  for (size_t gi = 0; gi < text.size(); gi++) {
    const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(text[gi])));
    if (up == ' ') continue;
    const Glyph* g = find_glyph(up);
    if (!g)
      throw std::invalid_argument(std::string("unsupported glyph character: ") + text[gi]);
    const int x0 = margin + static_cast<int>(gi) * 4;
    for (int r = 0; r < 5; r++)
      for (int col = 0; col < 3; col++)
        if (g->rows[r] & (4 >> col))
          for (int ch = 0; ch < shape.c; ch++) {
            content->at(0, ch, margin + r, x0 + col) = 1.0f;
            mask->at(0, ch, margin + r, x0 + col) = 1.0f;
          }
  }
}

Tensor render_abstract_pool(Shape shape, int n, uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("abstract pool: n must be positive");
  Tensor out(n, shape.c, shape.h, shape.w);
  for (int img = 0; img < n; img++) {
    auto rng = make_rng(derive_seed(seed, "abstract#" + std::to_string(img)));
    std::uniform_real_distribution<float> uf(0.0f, 1.0f);

    // Two-color gradient background along a random axis.
    std::vector<float> col_a(shape.c), col_b(shape.c);
    for (int ch = 0; ch < shape.c; ch++) {
      col_a[ch] = uf(rng);
      col_b[ch] = uf(rng);
    }
    const int axis = static_cast<int>(uf(rng) * 3.0f);  // 0=v 1=h 2=diag
    for (int y = 0; y < shape.h; y++)
      for (int x = 0; x < shape.w; x++) {
        float t;
        if (axis == 0)
          t = static_cast<float>(y) / (shape.h - 1);
        else if (axis == 1)
          t = static_cast<float>(x) / (shape.w - 1);
        else
          t = static_cast<float>(x + y) / (shape.w + shape.h - 2);
        for (int ch = 0; ch < shape.c; ch++)
          out.at(img, ch, y, x) = col_a[ch] + (col_b[ch] - col_a[ch]) * t;
      }

    // A handful of filled shapes, blended over the background.
    std::uniform_int_distribution<int> count_dist(3, 6);
    const int shapes = count_dist(rng);
    for (int s = 0; s < shapes; s++) {
      std::vector<float> col(shape.c);
      for (int ch = 0; ch < shape.c; ch++) col[ch] = uf(rng);
      const float alpha = 0.6f + 0.4f * uf(rng);
      const int kind = static_cast<int>(uf(rng) * 3.0f);
      auto blend = [&](int y, int x) {
        for (int ch = 0; ch < shape.c; ch++) {
          float& px = out.at(img, ch, y, x);
          px = (1.0f - alpha) * px + alpha * col[ch];
        }
      };
      if (kind == 0) {  // triangle
        float vx[3], vy[3];
        for (int v = 0; v < 3; v++) {
          vx[v] = uf(rng) * shape.w;
          vy[v] = uf(rng) * shape.h;
        }
        auto edge = [](float ax, float ay, float bx, float by, float px, float py) {
          return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        };
        for (int y = 0; y < shape.h; y++)
          for (int x = 0; x < shape.w; x++) {
            const float px = x + 0.5f, py = y + 0.5f;
            const float e0 = edge(vx[0], vy[0], vx[1], vy[1], px, py);
            const float e1 = edge(vx[1], vy[1], vx[2], vy[2], px, py);
            const float e2 = edge(vx[2], vy[2], vx[0], vy[0], px, py);
            if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) blend(y, x);
          }
      } else if (kind == 1) {  // rotated rectangle
        const float cx = uf(rng) * shape.w, cy = uf(rng) * shape.h;
        const float hw = (0.1f + 0.3f * uf(rng)) * shape.w;
        const float hh = (0.1f + 0.3f * uf(rng)) * shape.h;
        const float ang = uf(rng) * 3.14159265f;
        const float ca = std::cos(ang), sa = std::sin(ang);
        for (int y = 0; y < shape.h; y++)
          for (int x = 0; x < shape.w; x++) {
            const float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
            const float u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
            if (std::fabs(u) <= hw && std::fabs(v) <= hh) blend(y, x);
          }
      } else {  // ellipse
        const float cx = uf(rng) * shape.w, cy = uf(rng) * shape.h;
        const float rx = (0.1f + 0.3f * uf(rng)) * shape.w;
        const float ry = (0.1f + 0.3f * uf(rng)) * shape.h;
        for (int y = 0; y < shape.h; y++)
          for (int x = 0; x < shape.w; x++) {
            const float dx = (x + 0.5f - cx) / rx, dy = (y + 0.5f - cy) / ry;
            if (dx * dx + dy * dy <= 1.0f) blend(y, x);
          }
      }
    }

    std::normal_distribution<float> noise(0.0f, 0.02f);
    for (int ch = 0; ch < shape.c; ch++)
      for (int y = 0; y < shape.h; y++)
        for (int x = 0; x < shape.w; x++) {
          float& px = out.at(img, ch, y, x);
          px = clampf(px + noise(rng), 0.0f, 1.0f);
        }
  }
  return out;
}

TriggerSet generate_trigger_set(SchemeId scheme, const LabeledImageSet& sources,
                                const LabeledImageSet* pool, const ClassifierModel* model0,
                                const TriggerGenParams& params) {
  if (params.num_keys <= 0) throw std::invalid_argument("num_keys must be positive");
  const int K = params.num_classes > 0 ? params.num_classes : sources.num_classes;
  if (K <= 1) throw std::invalid_argument("need at least two classes");
  if (sources.images.n == 0) throw std::invalid_argument("empty source set");
  const Shape shape = shape_of(sources.images);

  const bool needs_model0 =
      scheme == SchemeId::adv || scheme == SchemeId::deepsigns || scheme == SchemeId::exp;
  if (needs_model0 && model0 == nullptr)
    throw std::invalid_argument(to_string(scheme) + " scheme needs a pretrained model");

  auto sample_rng = make_rng(derive_seed(params.seed, "sample"));
  auto label_rng = make_rng(derive_seed(params.seed, "labels"));

  TriggerSet ts;
  ts.scheme = scheme;
  ts.gen_params = json{{"seed", params.seed}, {"num_keys", params.num_keys}};

  switch (scheme) {
    case SchemeId::content: {
      const int src = resolve_source_class(params, K, label_rng);
      const int target = resolve_target_label(params, K, src, label_rng);
      auto idx = sample_class_indices(sources, src, params.num_keys, sample_rng);
      Tensor content, mask;
      render_text_overlay(shape, params.glyph_text, &content, &mask);
      int lit = 0;
      for (int y = 0; y < shape.h; y++)
        for (int x = 0; x < shape.w; x++)
          if (mask.at(0, 0, y, x) > 0.0f) lit++;
      if (lit > shape.h * shape.w / 5)
        throw std::invalid_argument("text overlay covers more than 20% of pixels");
      ts.key_images = superimpose(sources.images.gather(idx), content, mask);
      quantize_tensor(ts.key_images);
      ts.target_labels.assign(params.num_keys, target);
      ts.gen_params["source_class"] = src;
      ts.gen_params["target_label"] = target;
      ts.gen_params["glyph_text"] = params.glyph_text;
      ts.gen_params["source_indices"] = idx;
      break;
    }
    case SchemeId::noise: {
      const int src = resolve_source_class(params, K, label_rng);
      const int target = resolve_target_label(params, K, src, label_rng);
      auto idx = sample_class_indices(sources, src, params.num_keys, sample_rng);
      ts.key_images = sources.images.gather(idx);
      for (int i = 0; i < ts.key_images.n; i++) {
        auto nrng = make_rng(derive_seed(params.seed, "noise#" + std::to_string(i)));
        std::normal_distribution<float> gauss(0.0f, params.noise_sigma);
        float* px = ts.key_images.sample(i);
        for (int j = 0; j < ts.key_images.per_sample(); j++)
          px[j] = clampf(px[j] + gauss(nrng), 0.0f, 1.0f);
      }
      quantize_tensor(ts.key_images);
      ts.target_labels.assign(params.num_keys, target);
      ts.gen_params["source_class"] = src;
      ts.gen_params["target_label"] = target;
      ts.gen_params["noise_sigma"] = params.noise_sigma;
      ts.gen_params["source_indices"] = idx;
      break;
    }
    case SchemeId::unrelated: {
      if (pool == nullptr || pool->images.n == 0)
        throw std::invalid_argument("unrelated scheme needs a non-empty image pool");
      if (shape_of(pool->images) != shape)
        throw std::invalid_argument("pool shape " + pool->images.shape_str() +
                                    " does not match task shape");
      const int target = resolve_target_label(params, K, -1, label_rng);
      auto idx = sample_any_indices(pool->images.n, params.num_keys, sample_rng);
      ts.key_images = pool->images.gather(idx);
      quantize_tensor(ts.key_images);
      ts.target_labels.assign(params.num_keys, target);
      ts.gen_params["target_label"] = target;
      ts.gen_params["pool_provenance"] = to_string(pool->provenance);
      ts.gen_params["pool_indices"] = idx;
      break;
    }
    case SchemeId::mark: {
      const int src = resolve_source_class(params, K, label_rng);
      auto idx = sample_class_indices(sources, src, params.num_keys, sample_rng);
      ts.key_images = sources.images.gather(idx);
      const uint64_t sig_hash = fnv1a64(params.owner_signature);
      // Label alphabet: the largest power of two that fits the class count,
      // so each label carries a whole number of signature bits.
      int bits = 1;
      while ((1 << (bits + 1)) <= K) bits++;
      ts.target_labels.resize(params.num_keys);
      for (int i = 0; i < params.num_keys; i++) {
        auto prng = make_rng(derive_seed(sig_hash, "mark_pattern#" + std::to_string(i)));
        std::uniform_int_distribution<int> bit(0, 1);
        float* px = ts.key_images.sample(i);
        for (int j = 0; j < ts.key_images.per_sample(); j++) {
          const float delta = bit(prng) ? params.noise_sigma : -params.noise_sigma;
          px[j] = clampf(px[j] + delta, 0.0f, 1.0f);
        }
        const uint64_t hv = splitmix64(sig_hash ^ (0x9E3779B97F4A7C15ULL * (i + 1)));
        ts.target_labels[i] = static_cast<int>(hv & ((1u << bits) - 1));
      }
      quantize_tensor(ts.key_images);
      ts.gen_params["source_class"] = src;
      ts.gen_params["owner_signature"] = params.owner_signature;
      ts.gen_params["noise_sigma"] = params.noise_sigma;
      ts.gen_params["source_indices"] = idx;
      break;
    }
    case SchemeId::abstract:
    case SchemeId::passport: {
      Tensor keys;
      if (pool != nullptr && pool->images.n > 0) {
        if (shape_of(pool->images) != shape)
          throw std::invalid_argument("pool shape " + pool->images.shape_str() +
                                      " does not match task shape");
        auto idx = sample_any_indices(pool->images.n, params.num_keys, sample_rng);
        keys = pool->images.gather(idx);
        ts.gen_params["pool_indices"] = idx;
      } else {
        keys = render_abstract_pool(shape, params.num_keys,
                                    derive_seed(params.seed, "abstract_pool"));
      }
      ts.key_images = std::move(keys);
      quantize_tensor(ts.key_images);
      std::uniform_int_distribution<int> dist(0, K - 1);
      ts.target_labels.resize(params.num_keys);
      for (int& l : ts.target_labels) l = dist(label_rng);
      break;
    }
    case SchemeId::adv: {
      if (params.epsilon < 0.0f) throw std::invalid_argument("epsilon must be non-negative");
      auto idx = sample_any_indices(sources.images.n, params.num_keys, sample_rng);
      Tensor x = sources.images.gather(idx);
      std::vector<int> gt(params.num_keys);
      for (int i = 0; i < params.num_keys; i++) gt[i] = sources.labels[idx[i]];
      Tensor g = input_gradient(*model0, x, gt);
      for (size_t j = 0; j < x.data.size(); j++) {
        const float s = g.data[j] > 0.0f ? 1.0f : (g.data[j] < 0.0f ? -1.0f : 0.0f);
        x.data[j] = clampf(x.data[j] + params.epsilon * s, 0.0f, 1.0f);
      }
      quantize_tensor(x);
      ts.key_images = std::move(x);
      ts.target_labels = std::move(gt);
      ts.gen_params["epsilon"] = params.epsilon;
      ts.gen_params["source_indices"] = idx;
      break;
    }
    case SchemeId::encoder: {
      // Train the reconstruction GAN on a slice of the owner data, then use
      // its reconstructions of fresh samples as keys.
      auto fit_rng = make_rng(derive_seed(params.seed, "encoder_fit"));
      const int fit_n = std::min(sources.images.n, std::max(1, params.encoder_fit_images));
      auto fit_idx = sample_any_indices(sources.images.n, fit_n, fit_rng);
      SynthUNet gen(shape, derive_seed(params.seed, "encoder_gen"));
      Sequential disc = build_discriminator(shape, derive_seed(params.seed, "encoder_disc"));
      GanSpec gs;
      gs.epochs = params.gan_epochs;
      gs.seed = derive_seed(params.seed, "encoder_gan");
      train_reconstruction_gan(gen, disc, sources.images.gather(fit_idx), gs);

      auto idx = sample_any_indices(sources.images.n, params.num_keys, sample_rng);
      ts.key_images = gen.forward(sources.images.gather(idx), false);
      quantize_tensor(ts.key_images);
      std::uniform_int_distribution<int> dist(0, K - 1);
      ts.target_labels.resize(params.num_keys);
      for (int& l : ts.target_labels) l = dist(label_rng);
      ts.gen_params["gan_epochs"] = params.gan_epochs;
      ts.gen_params["source_indices"] = idx;
      break;
    }
    case SchemeId::exp: {
      // Keys are verbatim members of the training set (copied, not
      // re-quantized, so byte membership holds whatever the source grid).
      auto idx = sample_any_indices(sources.images.n, params.num_keys, sample_rng);
      ts.key_images = sources.images.gather(idx);
      ts.target_labels.resize(params.num_keys);
      for (int i = 0; i < params.num_keys; i++)
        ts.target_labels[i] = pick_label_excluding(label_rng, K, sources.labels[idx[i]]);
      ts.gen_params["source_indices"] = idx;
      break;
    }
    case SchemeId::deepsigns: {
      ts.key_images = Tensor(params.num_keys, shape.c, shape.h, shape.w);
      ts.target_labels.resize(params.num_keys);
      std::uniform_int_distribution<int> ldist(0, K - 1);
      for (int i = 0; i < params.num_keys; i++) {
        const int target = ldist(label_rng);
        auto irng = make_rng(derive_seed(params.seed, "deepsigns#" + std::to_string(i)));
        std::uniform_real_distribution<float> uf(0.0f, 1.0f);
        Tensor probe(1, shape.c, shape.h, shape.w);
        bool accepted = false;
        for (int attempt = 0; attempt < params.deepsigns_max_resample; attempt++) {
          for (float& v : probe.data) v = quantize8(uf(irng));
          if (model0->predict(probe)[0] != target) {
            accepted = true;
            break;
          }
        }
        if (!accepted)
          throw std::runtime_error("deepsigns: resampling cap exceeded for key " +
                                   std::to_string(i));
        std::copy(probe.data.begin(), probe.data.end(), ts.key_images.sample(i));
        ts.target_labels[i] = target;
      }
      break;
    }
  }

  if (ts.key_images.n != static_cast<int>(ts.target_labels.size()))
    throw std::logic_error("trigger set size mismatch");
  for (int l : ts.target_labels)
    if (l < 0 || l >= K) throw std::logic_error("target label out of range");
  return ts;
}

namespace {

// train + trigger (repeated) as one shuffled-at-train-time pool.
void combine_with_trigger(const LabeledImageSet& train, const TriggerSet& trigger, int repeat,
                          Tensor* images, std::vector<int>* labels) {
  *images = train.images;
  *labels = train.labels;
  for (int r = 0; r < repeat; r++) {
    *images = Tensor::concat(*images, trigger.key_images);
    labels->insert(labels->end(), trigger.target_labels.begin(), trigger.target_labels.end());
  }
}

TrainHistory train_passport_multitask(ClassifierModel& model, const Tensor& images,
                                      const std::vector<int>& labels, const TrainSpec& spec) {
  OptimSpec ospec;
  ospec.kind = spec.optimizer;
  ospec.lr = spec.learning_rate;
  Optimizer opt(model.params(), ospec);
  TrainHistory hist;
  for (int epoch = 0; epoch < spec.epochs; epoch++) {
    auto rng = make_rng(derive_seed(spec.seed, "epoch" + std::to_string(epoch)));
    std::vector<int> order = shuffled_indices(images.n, rng);
    double loss_acc = 0.0;
    int batches = 0;
    for (int start = 0; start < images.n; start += spec.batch_size) {
      const int bn = std::min(spec.batch_size, images.n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + bn);
      Tensor bx = images.gather(idx);
      std::vector<int> by(bn);
      for (int i = 0; i < bn; i++) by[i] = labels[idx[i]];

      // One step optimizes both inference modes on the same batch. Each
      // mode's backward runs right after its forward so layer caches match.
      model.net.zero_grad();
      model.set_passport_mode(PassportMode::inserted);
      LossGrad l1 = softmax_cross_entropy(model.net.forward(bx, true), by);
      model.net.backward(l1.grad);
      model.set_passport_mode(PassportMode::bypass);
      LossGrad l2 = softmax_cross_entropy(model.net.forward(bx, true), by);
      model.net.backward(l2.grad);
      opt.step();
      loss_acc += l1.loss + l2.loss;
      batches++;
    }
    hist.epoch_loss.push_back(loss_acc / batches);
  }
  return hist;
}

}  // namespace

WatermarkedModel embed_watermark(const LabeledImageSet& train, const LabeledImageSet& test,
                                 const TriggerSet& trigger, Arch arch, const TrainSpec& spec,
                                 const EmbedOptions& opt) {
  if (trigger.size() == 0) throw std::runtime_error("empty trigger set");
  if (shape_of(trigger.key_images) != shape_of(train.images))
    throw std::invalid_argument("trigger shape does not match training data");
  if (opt.trigger_repeat < 1) throw std::invalid_argument("trigger_repeat must be >= 1");
  const int K = train.num_classes;
  const Shape shape = shape_of(train.images);
  const SchemeId scheme = trigger.scheme;

  WatermarkedModel wm;
  wm.trigger = trigger;
  wm.embed_spec = spec;

  if (scheme == SchemeId::passport) {
    if (arch != Arch::resnet18_passport)
      throw std::invalid_argument("passport scheme requires the passport architecture");
    wm.model = build_passport_model(K, shape, derive_seed(spec.seed, "init"),
                                    derive_seed(spec.seed, "passport"));
    Tensor images;
    std::vector<int> labels;
    combine_with_trigger(train, trigger, opt.trigger_repeat, &images, &labels);
    wm.history = train_passport_multitask(wm.model, images, labels, spec);
  } else if (scheme == SchemeId::exp) {
    if (opt.pretrained == nullptr)
      throw std::invalid_argument("exp scheme fine-tunes a pretrained model; none given");
    // The keys are verbatim training images, so the originals must leave the
    // fine-tuning mix: identical bytes with both the true and the target
    // label would tug the model both ways and nothing gets memorized.
    LabeledImageSet aug = train;
    if (trigger.gen_params.contains("source_indices")) {
      const auto src = trigger.gen_params["source_indices"].get<std::vector<int>>();
      std::vector<bool> drop(train.images.n, false);
      for (int i : src)
        if (i >= 0 && i < train.images.n) drop[i] = true;
      std::vector<int> keep;
      for (int i = 0; i < train.images.n; i++)
        if (!drop[i]) keep.push_back(i);
      aug = train.subset(keep);
    }
    for (int r = 1; r < opt.trigger_repeat; r++) {
      aug.images = Tensor::concat(aug.images, trigger.key_images);
      aug.labels.insert(aug.labels.end(), trigger.target_labels.begin(),
                        trigger.target_labels.end());
    }
    wm.model = exponential_weighting_train(*opt.pretrained, aug, trigger, opt.ew_theta, spec);
  } else if (scheme == SchemeId::mark || scheme == SchemeId::adv) {
    if (opt.pretrained == nullptr)
      throw std::invalid_argument(to_string(scheme) +
                                  " scheme fine-tunes a pretrained model; none given");
    wm.model = *opt.pretrained;
    Tensor images;
    std::vector<int> labels;
    combine_with_trigger(train, trigger, opt.trigger_repeat, &images, &labels);
    wm.history = train_classifier(wm.model, images, labels, spec);
  } else {
    wm.model = build_classifier(arch, K, shape, derive_seed(spec.seed, "init"));
    Tensor images;
    std::vector<int> labels;
    combine_with_trigger(train, trigger, opt.trigger_repeat, &images, &labels);
    wm.history = train_classifier(wm.model, images, labels, spec);
  }

  wm.embed_recall = trigger_recall(wm.model, trigger);
  if (wm.model.has_passport_layers()) wm.model.set_passport_mode(PassportMode::inserted);
  wm.embed_test_acc = evaluate_accuracy(wm.model, test.images, test.labels);
  return wm;
}

ClassifierModel exponential_weighting_train(const ClassifierModel& model0,
                                            const LabeledImageSet& train,
                                            const TriggerSet& trigger, double theta,
                                            const TrainSpec& spec) {
  if (theta <= 0.0) throw std::invalid_argument("exponent theta must be positive");
  if (trigger.size() == 0) throw std::runtime_error("empty trigger set");
  ClassifierModel model = model0;
  model.set_ew_theta(theta);
  Tensor images = Tensor::concat(train.images, trigger.key_images);
  std::vector<int> labels = train.labels;
  labels.insert(labels.end(), trigger.target_labels.begin(), trigger.target_labels.end());
  train_classifier(model, images, labels, spec);
  model.bake_ew();
  return model;
}

ClassifierModel build_passport_model(int num_classes, Shape input_shape, uint64_t weight_seed,
                                     uint64_t passport_seed) {
  ClassifierModel model =
      build_classifier(Arch::resnet18_passport, num_classes, input_shape, weight_seed);
  bind_random_passports(model, passport_seed);
  return model;
}

double trigger_recall(ClassifierModel& model, const TriggerSet& trigger) {
  if (trigger.size() == 0) throw std::invalid_argument("empty trigger set");
  if (model.has_passport_layers()) model.set_passport_mode(PassportMode::inserted);
  std::vector<int> pred = model.predict(trigger.key_images);
  int hits = 0;
  for (int i = 0; i < trigger.size(); i++)
    if (pred[i] == trigger.target_labels[i]) hits++;
  return static_cast<double>(hits) / trigger.size();
}

double trigger_recall(WatermarkedModel& wm) { return trigger_recall(wm.model, wm.trigger); }

void save_trigger_set(const TriggerSet& ts, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "keys");

  char name[32];
  for (int i = 0; i < ts.size(); i++) {
    std::snprintf(name, sizeof(name), "%04d.png", i);
    write_png(dir / "keys" / name, ts.key_images, i);
  }

  std::ofstream csv(dir / "labels.csv");
  if (!csv) throw std::runtime_error("cannot write " + (dir / "labels.csv").string());
  csv << "idx,target_label\n";
  for (int i = 0; i < ts.size(); i++) csv << i << "," << ts.target_labels[i] << "\n";
  csv.close();

  json meta{{"scheme", to_string(ts.scheme)},
            {"num_keys", ts.size()},
            {"shape", {{"c", ts.key_images.c}, {"h", ts.key_images.h}, {"w", ts.key_images.w}}},
            {"gen_params", ts.gen_params}};
  std::ofstream mj(dir / "meta.json");
  if (!mj) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
  mj << meta.dump(2) << "\n";
}

TriggerSet load_trigger_set(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mj(dir / "meta.json");
  if (!mj) throw std::runtime_error("cannot open " + (dir / "meta.json").string());
  json meta = json::parse(mj);

  TriggerSet ts;
  ts.scheme = scheme_from_string(meta.at("scheme").get<std::string>());
  ts.gen_params = meta.value("gen_params", json::object());
  const int n = meta.at("num_keys").get<int>();
  const int c = meta.at("shape").at("c").get<int>();
  const int h = meta.at("shape").at("h").get<int>();
  const int w = meta.at("shape").at("w").get<int>();

  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw std::runtime_error("cannot open " + (dir / "labels.csv").string());
  std::string line;
  std::getline(csv, line);  // header
  ts.target_labels.assign(n, 0);
  std::vector<bool> seen(n, false);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("bad labels.csv row: " + line);
    const int idx = std::stoi(line.substr(0, comma));
    if (idx < 0 || idx >= n) throw std::runtime_error("labels.csv index out of range");
    ts.target_labels[idx] = std::stoi(line.substr(comma + 1));
    seen[idx] = true;
  }
  for (int i = 0; i < n; i++)
    if (!seen[i]) throw std::runtime_error("labels.csv missing index " + std::to_string(i));

  ts.key_images = Tensor(n, c, h, w);
  char name[32];
  for (int i = 0; i < n; i++) {
    std::snprintf(name, sizeof(name), "%04d.png", i);
    Tensor img = read_png(dir / "keys" / name);
    if (img.c != c || img.h != h || img.w != w)
      throw std::runtime_error(std::string("key image shape mismatch: ") + name);
    std::copy(img.data.begin(), img.data.end(), ts.key_images.sample(i));
  }
  return ts;
}

}  // namespace wmbench
