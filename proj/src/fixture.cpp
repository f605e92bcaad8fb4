#include "wmbench/fixture.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <random>

#include "json.hpp"
#include "wmbench/tensor.hpp"
#include "wmbench/util.hpp"

namespace wmbench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "fixture_manifest.json";
constexpr int kManifestVersion = 2;

// ---- drawing helpers on a single-channel float plane ----

struct Plane {
  int h, w;
  std::vector<float>& px;
  void add(int y, int x, float v) {
    if (y >= 0 && y < h && x >= 0 && x < w) px[y * w + x] = std::max(px[y * w + x], v);
  }
};

void fill_rect(Plane& p, int y0, int x0, int y1, int x1, float v) {
  for (int y = y0; y <= y1; y++)
    for (int x = x0; x <= x1; x++) p.add(y, x, v);
}

void fill_disc(Plane& p, float cy, float cx, float r, float v) {
  for (int y = 0; y < p.h; y++)
    for (int x = 0; x < p.w; x++)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) p.add(y, x, v);
}

// ---- glyph family: seven-segment style digits ----

// Segment order: A top, B upper-right, C lower-right, D bottom, E lower-left,
// F upper-left, G middle.
constexpr unsigned char kSegments[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8
    0b1101111,  // 9: ABCDFG
};

// Each digit is drawn from continuous segment endpoints pushed through a
// per-image affine (rotation, anisotropic scale, shear, translation) with
// per-segment thickness and intensity jitter. The variation matters: schemes
// that memorize individual training images need every sample to be
// distinguishable from its classmates, the way real handwriting is.
void render_glyph(int digit, std::mt19937& rng, std::vector<float>& px) {
  px.assign(28 * 28, 0.0f);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  auto urange = [&](float lo, float hi) { return lo + (hi - lo) * u01(rng); };

  struct Seg {
    float x0, y0, x1, y1;
  };
  const float hx = 6.0f, hy = 8.0f;
  const Seg segs[7] = {
      {-hx, -hy, hx, -hy},   // A
      {hx, -hy, hx, 0.0f},   // B
      {hx, 0.0f, hx, hy},    // C
      {-hx, hy, hx, hy},     // D
      {-hx, 0.0f, -hx, hy},  // E
      {-hx, -hy, -hx, 0.0f}, // F
      {-hx, 0.0f, hx, 0.0f}, // G
  };

  const float ang = urange(-0.30f, 0.30f);
  const float sx = urange(0.78f, 1.10f), sy = urange(0.78f, 1.10f);
  const float shear = urange(-0.25f, 0.25f);
  const float tx = 13.5f + urange(-2.0f, 2.0f), ty = 13.5f + urange(-2.0f, 2.0f);
  const float ca = std::cos(ang), sa = std::sin(ang);
  auto map = [&](float x, float y, float* ox, float* oy) {
    x *= sx;
    y *= sy;
    x += shear * y;
    *ox = ca * x - sa * y + tx;
    *oy = sa * x + ca * y + ty;
  };

  const float base = urange(0.55f, 1.0f);
  const unsigned char m = kSegments[digit];
  for (int s = 0; s < 7; s++) {
    if (!(m & (1 << s))) continue;
    float ax, ay, bx, by;
    map(segs[s].x0, segs[s].y0, &ax, &ay);
    map(segs[s].x1, segs[s].y1, &bx, &by);
    const float thick = urange(1.0f, 1.9f);
    const float inten = clampf(base * urange(0.85f, 1.15f), 0.0f, 1.0f);
    const float vx = bx - ax, vy = by - ay;
    const float len2 = vx * vx + vy * vy;
    for (int y = 0; y < 28; y++)
      for (int x = 0; x < 28; x++) {
        const float pxf = x + 0.5f, pyf = y + 0.5f;
        float t = ((pxf - ax) * vx + (pyf - ay) * vy) / len2;
        t = clampf(t, 0.0f, 1.0f);
        const float dx = pxf - (ax + t * vx), dy = pyf - (ay + t * vy);
        const float d = std::sqrt(dx * dx + dy * dy);
        const float cov = clampf(thick * 0.5f + 0.6f - d, 0.0f, 1.0f);
        float& v = px[y * 28 + x];
        v = std::max(v, inten * cov);
      }
  }

  std::normal_distribution<float> noise(0.0f, 0.05f);
  for (auto& v : px) v = clampf(v + noise(rng), 0.0f, 1.0f);
}

// ---- texture family: ten procedural fabric-like patterns ----

void render_texture(int cls, std::mt19937& rng, std::vector<float>& px) {
  px.assign(28 * 28, 0.0f);
  Plane p{28, 28, px};
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  std::uniform_real_distribution<float> di(0.55f, 0.95f);
  const float base = di(rng);

  switch (cls) {
    case 0: {  // horizontal stripes
      const int period = 3 + static_cast<int>(u01(rng) * 3);
      const int phase = static_cast<int>(u01(rng) * period);
      for (int y = 0; y < 28; y++)
        if (((y + phase) / (period / 2 + 1)) % 2 == 0)
          for (int x = 0; x < 28; x++) p.add(y, x, base);
      break;
    }
    case 1: {  // vertical stripes
      const int period = 3 + static_cast<int>(u01(rng) * 3);
      const int phase = static_cast<int>(u01(rng) * period);
      for (int x = 0; x < 28; x++)
        if (((x + phase) / (period / 2 + 1)) % 2 == 0)
          for (int y = 0; y < 28; y++) p.add(y, x, base);
      break;
    }
    case 2: {  // checkerboard
      const int cell = 3 + static_cast<int>(u01(rng) * 3);
      for (int y = 0; y < 28; y++)
        for (int x = 0; x < 28; x++)
          if (((y / cell) + (x / cell)) % 2 == 0) p.add(y, x, base);
      break;
    }
    case 3: {  // polka dots
      const int gap = 6 + static_cast<int>(u01(rng) * 3);
      const float r = 1.4f + u01(rng);
      for (int cy = gap / 2; cy < 28; cy += gap)
        for (int cx = gap / 2; cx < 28; cx += gap) fill_disc(p, cy, cx, r, base);
      break;
    }
    case 4:  // filled disc
      fill_disc(p, 13.5f + u01(rng) * 4 - 2, 13.5f + u01(rng) * 4 - 2, 7.0f + u01(rng) * 3, base);
      break;
    case 5: {  // ring
      const float cy = 13.5f + u01(rng) * 3 - 1.5f, cx = 13.5f + u01(rng) * 3 - 1.5f;
      const float r = 8.0f + u01(rng) * 3;
      fill_disc(p, cy, cx, r, base);
      std::vector<float> hole(28 * 28, 0.0f);
      Plane ph{28, 28, hole};
      fill_disc(ph, cy, cx, r - 2.5f, 1.0f);
      for (int i = 0; i < 28 * 28; i++)
        if (hole[i] > 0) px[i] = 0.0f;
      break;
    }
    case 6: {  // filled triangle
      const int ty = 4 + static_cast<int>(u01(rng) * 3);
      const int by = 23 - static_cast<int>(u01(rng) * 3);
      const float cx = 13.5f + u01(rng) * 4 - 2;
      for (int y = ty; y <= by; y++) {
        const float half = 11.0f * (y - ty) / (by - ty);
        for (int x = static_cast<int>(cx - half); x <= static_cast<int>(cx + half); x++)
          p.add(y, x, base);
      }
      break;
    }
    case 7: {  // diagonal crosshatch
      const int period = 4 + static_cast<int>(u01(rng) * 3);
      for (int y = 0; y < 28; y++)
        for (int x = 0; x < 28; x++)
          if ((y + x) % period < 2 || (y - x + 56) % period < 2) p.add(y, x, base);
      break;
    }
    case 8: {  // linear gradient
      const bool flip = u01(rng) < 0.5f;
      for (int y = 0; y < 28; y++)
        for (int x = 0; x < 28; x++) {
          const float t = (flip ? x : y) / 27.0f;
          p.add(y, x, base * t);
        }
      break;
    }
    default: {  // random soft blobs
      const int k = 4 + static_cast<int>(u01(rng) * 4);
      for (int i = 0; i < k; i++) {
        const float cy = u01(rng) * 27, cx = u01(rng) * 27, r = 2.0f + u01(rng) * 3;
        for (int y = 0; y < 28; y++)
          for (int x = 0; x < 28; x++) {
            const float d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            p.add(y, x, base * std::exp(-d2 / (2 * r * r)));
          }
      }
      break;
    }
  }

  std::normal_distribution<float> noise(0.0f, 0.04f);
  for (auto& v : px) v = clampf(v + noise(rng), 0.0f, 1.0f);
}

// ---- 32x32 color families ----

void hsv_to_rgb(float h, float s, float v, float rgb[3]) {
  const float c = v * s;
  const float hp = h * 6.0f;
  const float x = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const float m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// Class-keyed hue and shape on a muted random gradient background.
void render_color_shape(int cls, std::mt19937& rng, std::vector<float>& px) {
  px.assign(3 * 32 * 32, 0.0f);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);

  float top[3], bottom[3], fg[3];
  hsv_to_rgb(u01(rng), 0.15f + 0.2f * u01(rng), 0.25f + 0.3f * u01(rng), top);
  hsv_to_rgb(u01(rng), 0.15f + 0.2f * u01(rng), 0.25f + 0.3f * u01(rng), bottom);
  const float hue = std::fmod(cls / 10.0f + (u01(rng) - 0.5f) * 0.06f + 1.0f, 1.0f);
  hsv_to_rgb(hue, 0.75f + 0.25f * u01(rng), 0.75f + 0.25f * u01(rng), fg);

  auto set = [&](int y, int x, const float* rgb) {
    for (int ci = 0; ci < 3; ci++) px[ci * 1024 + y * 32 + x] = rgb[ci];
  };
  for (int y = 0; y < 32; y++) {
    const float t = y / 31.0f;
    float row[3];
    for (int ci = 0; ci < 3; ci++) row[ci] = top[ci] * (1 - t) + bottom[ci] * t;
    for (int x = 0; x < 32; x++) set(y, x, row);
  }

  const float cy = 15.5f + (u01(rng) - 0.5f) * 6, cx = 15.5f + (u01(rng) - 0.5f) * 6;
  const float r = 7.0f + u01(rng) * 3.5f;
  auto inside = [&](int y, int x) -> bool {
    const float dy = y - cy, dx = x - cx;
    switch (cls) {
      case 0: return dy * dy + dx * dx <= r * r;                           // disc
      case 1: return std::abs(dy) <= r * 0.8f && std::abs(dx) <= r * 0.8f; // square
      case 2: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2;  // triangle
      case 3: {                                                            // ring
        const float d2 = dy * dy + dx * dx;
        return d2 <= r * r && d2 >= (r - 3) * (r - 3);
      }
      case 4:                                                              // cross
        return std::abs(dy) <= r && std::abs(dx) <= r &&
               (std::abs(dy) <= 2 || std::abs(dx) <= 2);
      case 5: return std::abs(dy) <= 3 && std::abs(dx) <= r;               // horizontal bar
      case 6: return std::abs(dx) <= 3 && std::abs(dy) <= r;               // vertical bar
      case 7: return std::abs(dy) + std::abs(dx) <= r;                     // diamond
      case 8: {                                                            // dot grid
        const int gy = static_cast<int>(dy + 16) % 8, gx = static_cast<int>(dx + 16) % 8;
        return std::abs(dy) <= r && std::abs(dx) <= r && gy < 3 && gx < 3;
      }
      default: {                                                           // checker patch
        const int gy = static_cast<int>(y / 4), gx = static_cast<int>(x / 4);
        return std::abs(dy) <= r && std::abs(dx) <= r && (gy + gx) % 2 == 0;
      }
    }
  };
  for (int y = 0; y < 32; y++)
    for (int x = 0; x < 32; x++)
      if (inside(y, x)) set(y, x, fg);

  std::normal_distribution<float> noise(0.0f, 0.03f);
  for (auto& v : px) v = clampf(v + noise(rng), 0.0f, 1.0f);
}

// Out-of-distribution色 textures keyed by a 100-way label.
void render_color_texture(int label, std::mt19937& rng, std::vector<float>& px) {
  px.assign(3 * 32 * 32, 0.0f);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  float ca[3], cb[3];
  const float hue = std::fmod(label * 0.37f, 1.0f);
  hsv_to_rgb(hue, 0.6f + 0.3f * u01(rng), 0.5f + 0.4f * u01(rng), ca);
  hsv_to_rgb(std::fmod(hue + 0.45f, 1.0f), 0.5f + 0.3f * u01(rng), 0.4f + 0.4f * u01(rng), cb);

  auto set = [&](int y, int x, const float* rgb, float mix) {
    for (int ci = 0; ci < 3; ci++)
      px[ci * 1024 + y * 32 + x] = rgb[ci] * mix + px[ci * 1024 + y * 32 + x] * (1 - mix);
  };
  for (int y = 0; y < 32; y++)
    for (int x = 0; x < 32; x++) set(y, x, cb, 1.0f);

  const int family = label % 4;
  const int period = 4 + label % 5;
  const float phase = u01(rng) * period;
  for (int y = 0; y < 32; y++) {
    for (int x = 0; x < 32; x++) {
      bool on = false;
      switch (family) {
        case 0: on = static_cast<int>(y + x + phase) % period < period / 2; break;
        case 1: {
          const float d = std::hypot(y - 15.5f, x - 15.5f);
          on = static_cast<int>(d + phase) % period < period / 2;
          break;
        }
        case 2: on = (y / period + static_cast<int>(phase)) % 2 == 0; break;
        default:
          on = std::sin((y + phase) * 0.7f + std::sin(x * 0.4f) * 2.0f) > 0;
          break;
      }
      if (on) set(y, x, ca, 1.0f);
    }
  }
  std::normal_distribution<float> noise(0.0f, 0.03f);
  for (auto& v : px) v = clampf(v + noise(rng), 0.0f, 1.0f);
}

// ---- archive writers ----

void put_be32(std::ofstream& os, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(clampf(v, 0.0f, 1.0f) * 255.0f + 0.5f);
}

void write_idx(const fs::path& dir, const std::string& stem, int n, int h, int w,
               const std::function<void(int, std::vector<float>&, int&)>& make) {
  fs::create_directories(dir);
  std::ofstream imgs(dir / (stem + "-images-idx3-ubyte"), std::ios::binary);
  std::ofstream labs(dir / (stem + "-labels-idx1-ubyte"), std::ios::binary);
  if (!imgs || !labs) throw std::runtime_error("fixture: cannot write idx files in " + dir.string());
  put_be32(imgs, 0x00000803);
  put_be32(imgs, n);
  put_be32(imgs, h);
  put_be32(imgs, w);
  put_be32(labs, 0x00000801);
  put_be32(labs, n);

  std::vector<float> px;
  for (int i = 0; i < n; i++) {
    int label = 0;
    make(i, px, label);
    std::vector<unsigned char> bytes(px.size());
    for (size_t j = 0; j < px.size(); j++) bytes[j] = to_byte(px[j]);
    imgs.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    labs.put(static_cast<char>(label));
  }
}

void write_cifar(const fs::path& file, int n, int label_bytes,
                 const std::function<void(int, std::vector<float>&, int&)>& make) {
  fs::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("fixture: cannot write " + file.string());
  std::vector<float> px;
  for (int i = 0; i < n; i++) {
    int label = 0;
    make(i, px, label);
    if (label_bytes == 2) os.put(static_cast<char>(label % 20));  // coarse stand-in
    os.put(static_cast<char>(label));
    std::vector<unsigned char> bytes(px.size());
    for (size_t j = 0; j < px.size(); j++) bytes[j] = to_byte(px[j]);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

json manifest_json(const FixtureSpec& s) {
  return json{{"kind", "procedural-fixture"},
              {"version", kManifestVersion},
              {"seed", s.seed},
              {"mnist_train", s.mnist_train},
              {"mnist_test", s.mnist_test},
              {"fashion_train", s.fashion_train},
              {"fashion_test", s.fashion_test},
              {"cifar_train", s.cifar_train},
              {"cifar_test", s.cifar_test},
              {"cifar100_train", s.cifar100_train},
              {"cifar100_test", s.cifar100_test}};
}

}  // namespace

bool is_fixture_corpus(const fs::path& root) { return fs::exists(root / kManifestName); }

bool write_fixture_corpus(const fs::path& root, const FixtureSpec& spec) {
  const fs::path marker = root / kManifestName;
  const json want = manifest_json(spec);
  if (fs::exists(marker)) {
    try {
      json have = json::parse(std::ifstream(marker));
      if (have == want) return false;
    } catch (const std::exception&) {
      // fall through and regenerate
    }
  }

  // Balanced labels: round-robin class assignment with a shuffled order, so
  // every prefix of the archive is roughly balanced too.
  auto make_family = [&](const std::string& fam, int classes, uint64_t salt,
                         void (*render)(int, std::mt19937&, std::vector<float>&)) {
    return [fam, classes, salt, render, &spec](int i, std::vector<float>& px, int& label) {
      auto rng = make_rng(derive_seed(spec.seed, fam + std::to_string(salt) + "#" + std::to_string(i)));
      label = static_cast<int>((static_cast<uint64_t>(i) * 7 + salt) % classes);
      render(label, rng, px);
    };
  };

  write_idx(root / "mnist", "train", spec.mnist_train, 28, 28,
            make_family("glyph", 10, 11, render_glyph));
  write_idx(root / "mnist", "t10k", spec.mnist_test, 28, 28,
            make_family("glyph", 10, 13, render_glyph));
  write_idx(root / "fashion-mnist", "train", spec.fashion_train, 28, 28,
            make_family("texture", 10, 17, render_texture));
  write_idx(root / "fashion-mnist", "t10k", spec.fashion_test, 28, 28,
            make_family("texture", 10, 19, render_texture));
  write_cifar(root / "cifar10" / "data_batch_1.bin", spec.cifar_train, 1,
              make_family("shape", 10, 23, render_color_shape));
  write_cifar(root / "cifar10" / "test_batch.bin", spec.cifar_test, 1,
              make_family("shape", 10, 29, render_color_shape));
  write_cifar(root / "cifar100" / "train.bin", spec.cifar100_train, 2,
              make_family("ood", 100, 31, render_color_texture));
  write_cifar(root / "cifar100" / "test.bin", spec.cifar100_test, 2,
              make_family("ood", 100, 37, render_color_texture));

  std::ofstream ms(marker);
  ms << want.dump(2) << "\n";
  if (!ms) throw std::runtime_error("fixture: cannot write manifest " + marker.string());
  return true;
}

}  // namespace wmbench
