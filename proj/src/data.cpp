#include "wmbench/data.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "wmbench/pngio.hpp"
#include "wmbench/util.hpp"

namespace wmbench {

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Reads <path> or <path>.gz, inflating in the latter case.
std::vector<unsigned char> read_maybe_gz(const fs::path& path) {
  if (fs::exists(path)) return read_file_bytes(path);
  const fs::path gz = path.string() + ".gz";
  if (!fs::exists(gz))
    throw std::runtime_error("dataset file missing: " + path.string() + " (or .gz)");

  auto comp = read_file_bytes(gz);
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) throw std::runtime_error("gzip init failed");
  std::vector<unsigned char> out;
  out.reserve(comp.size() * 4);
  std::vector<unsigned char> chunk(1 << 16);
  zs.next_in = comp.data();
  zs.avail_in = static_cast<uInt>(comp.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw std::runtime_error("gzip decode failed for " + gz.string());
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

uint32_t be32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

// idx image/label pair as used by the mnist-family archives.
LabeledImageSet load_idx_pair(const fs::path& images_path, const fs::path& labels_path) {
  auto ib = read_maybe_gz(images_path);
  if (ib.size() < 16 || be32(ib.data()) != 0x00000803)
    throw std::runtime_error("bad idx image file: " + images_path.string());
  const int n = static_cast<int>(be32(&ib[4]));
  const int h = static_cast<int>(be32(&ib[8]));
  const int w = static_cast<int>(be32(&ib[12]));
  if (ib.size() != 16 + static_cast<size_t>(n) * h * w)
    throw std::runtime_error("idx image payload size mismatch: " + images_path.string());

  auto lb = read_maybe_gz(labels_path);
  if (lb.size() < 8 || be32(lb.data()) != 0x00000801)
    throw std::runtime_error("bad idx label file: " + labels_path.string());
  if (static_cast<int>(be32(&lb[4])) != n || lb.size() != 8 + static_cast<size_t>(n))
    throw std::runtime_error("idx label count mismatch: " + labels_path.string());

  LabeledImageSet set;
  set.images = Tensor(n, 1, h, w);
  set.labels.resize(n);
  for (size_t i = 0; i < static_cast<size_t>(n) * h * w; i++)
    set.images.data[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  int max_label = 0;
  for (int i = 0; i < n; i++) {
    set.labels[i] = lb[8 + i];
    max_label = std::max(max_label, set.labels[i]);
  }
  set.num_classes = max_label + 1;
  return set;
}

// cifar batch files: fixed-size records, one or two label bytes then three
// 1024-byte channel planes.
LabeledImageSet load_cifar_files(const std::vector<fs::path>& paths, int label_bytes,
                                 int label_offset, int num_classes) {
  const size_t rec = static_cast<size_t>(label_bytes) + 3072;
  std::vector<unsigned char> all;
  for (const auto& p : paths) {
    auto b = read_file_bytes(p);
    if (b.empty() || b.size() % rec != 0)
      throw std::runtime_error("cifar batch size is not a record multiple: " + p.string());
    all.insert(all.end(), b.begin(), b.end());
  }
  const int n = static_cast<int>(all.size() / rec);
  LabeledImageSet set;
  set.images = Tensor(n, 3, 32, 32);
  set.labels.resize(n);
  set.num_classes = num_classes;
  for (int i = 0; i < n; i++) {
    const unsigned char* r = &all[static_cast<size_t>(i) * rec];
    set.labels[i] = r[label_offset];
    if (set.labels[i] >= num_classes)
      throw std::runtime_error("cifar label out of range in record " + std::to_string(i));
    const unsigned char* px = r + label_bytes;
    float* dst = set.images.sample(i);
    for (int j = 0; j < 3072; j++) dst[j] = static_cast<float>(px[j]) / 255.0f;
  }
  return set;
}

LabeledImageSet take_first(const LabeledImageSet& set, int count) {
  if (set.size() <= count) return set;
  std::vector<int> idx(count);
  for (int i = 0; i < count; i++) idx[i] = i;
  return set.subset(idx);
}

constexpr int kSubsetSize = 10000;

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::owner_train: return "owner_train";
    case Provenance::test_pool: return "test_pool";
    case Provenance::adv_test_half: return "adv_test_half";
    case Provenance::eval_test_half: return "eval_test_half";
    case Provenance::surrogate: return "surrogate";
    case Provenance::synthetic: return "synthetic";
  }
  throw std::logic_error("bad provenance enum");
}

LabeledImageSet LabeledImageSet::subset(const std::vector<int>& idx) const {
  LabeledImageSet out;
  out.images = images.gather(idx);
  out.provenance = provenance;
  out.num_classes = num_classes;
  if (labeled()) {
    out.labels.resize(idx.size());
    for (size_t i = 0; i < idx.size(); i++) out.labels[i] = labels[idx[i]];
  }
  return out;
}

Dataset load_dataset(const std::string& name, const fs::path& root) {
  Dataset ds;
  ds.name = name;

  if (name == "mnist" || name == "fashion-mnist") {
    const fs::path dir = root / name;
    ds.train = load_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    ds.test = load_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  } else if (name == "cifar10" || name == "cifar10-subset") {
    const fs::path dir = root / "cifar10";
    std::vector<fs::path> train_files;
    for (int b = 1; b <= 5; b++) {
      fs::path p = dir / ("data_batch_" + std::to_string(b) + ".bin");
      if (fs::exists(p)) train_files.push_back(p);
    }
    if (train_files.empty())
      throw std::runtime_error("no cifar10 train batches under " + dir.string());
    ds.train = load_cifar_files(train_files, 1, 0, 10);
    ds.test = load_cifar_files({dir / "test_batch.bin"}, 1, 0, 10);
    if (name == "cifar10-subset") ds.train = take_first(ds.train, kSubsetSize);
  } else if (name == "cifar100" || name == "cifar100-subset") {
    const fs::path dir = root / "cifar100";
    ds.train = load_cifar_files({dir / "train.bin"}, 2, 1, 100);  // fine labels
    ds.test = load_cifar_files({dir / "test.bin"}, 2, 1, 100);
    if (name == "cifar100-subset") ds.train = take_first(ds.train, kSubsetSize);
  } else {
    throw std::invalid_argument("unsupported dataset: " + name);
  }

  ds.num_classes = std::max(ds.train.num_classes, ds.test.num_classes);
  ds.train.num_classes = ds.num_classes;
  ds.test.num_classes = ds.num_classes;
  ds.train.provenance = Provenance::owner_train;
  ds.test.provenance = Provenance::test_pool;
  return ds;
}

std::pair<LabeledImageSet, LabeledImageSet> split_adversary_data(const LabeledImageSet& test,
                                                                 const SplitSpec& spec) {
  if (spec.adversary_fraction < 0.0 || spec.adversary_fraction > 1.0)
    throw std::invalid_argument("adversary_fraction must lie in [0,1]");
  const int n = test.size();
  const int n_adv = static_cast<int>(std::llround(spec.adversary_fraction * n));

  auto rng = make_rng(derive_seed(spec.seed, "adversary_split"));
  auto order = shuffled_indices(n, rng);
  std::vector<int> adv_idx(order.begin(), order.begin() + n_adv);
  std::vector<int> eval_idx(order.begin() + n_adv, order.end());

  LabeledImageSet adv = test.subset(adv_idx);
  LabeledImageSet ev = test.subset(eval_idx);
  adv.provenance = Provenance::adv_test_half;
  ev.provenance = Provenance::eval_test_half;
  return {adv, ev};
}

Tensor resize_to(const Tensor& images, Shape target) {
  if (shape_of(images) == target) return images;

  // Channel adaptation first: gray -> replicate, color -> luminance-style mean.
  Tensor chan = images;
  if (images.c != target.c) {
    chan = Tensor(images.n, target.c, images.h, images.w);
    const int plane = images.h * images.w;
    for (int s = 0; s < images.n; s++) {
      const float* src = images.sample(s);
      float* dst = chan.sample(s);
      for (int p = 0; p < plane; p++) {
        float acc = 0.0f;
        for (int ci = 0; ci < images.c; ci++) acc += src[ci * plane + p];
        acc /= static_cast<float>(images.c);
        for (int ci = 0; ci < target.c; ci++)
          dst[ci * plane + p] = images.c == 1 ? src[p] : acc;
      }
    }
  }

  if (chan.h == target.h && chan.w == target.w) return chan;
  Tensor out(images.n, target.c, target.h, target.w);
  const float sy = static_cast<float>(chan.h) / target.h;
  const float sx = static_cast<float>(chan.w) / target.w;
  for (int s = 0; s < chan.n; s++) {
    for (int ci = 0; ci < target.c; ci++) {
      const float* plane = chan.sample(s) + static_cast<size_t>(ci) * chan.h * chan.w;
      for (int oy = 0; oy < target.h; oy++) {
        const float fy = (oy + 0.5f) * sy - 0.5f;
        const int y0 = std::max(0, std::min(chan.h - 1, static_cast<int>(std::floor(fy))));
        const int y1 = std::min(chan.h - 1, y0 + 1);
        const float wy = clampf(fy - y0, 0.0f, 1.0f);
        for (int ox = 0; ox < target.w; ox++) {
          const float fx = (ox + 0.5f) * sx - 0.5f;
          const int x0 = std::max(0, std::min(chan.w - 1, static_cast<int>(std::floor(fx))));
          const int x1 = std::min(chan.w - 1, x0 + 1);
          const float wx = clampf(fx - x0, 0.0f, 1.0f);
          const float top = plane[y0 * chan.w + x0] * (1 - wx) + plane[y0 * chan.w + x1] * wx;
          const float bot = plane[y1 * chan.w + x0] * (1 - wx) + plane[y1 * chan.w + x1] * wx;
          out.at(s, ci, oy, ox) = top * (1 - wy) + bot * wy;
        }
      }
    }
  }
  return out;
}

LabeledImageSet surrogate_source(const std::string& dataset_name, const fs::path& root) {
  std::string source;
  Shape target;
  if (dataset_name == "mnist") {
    source = "fashion-mnist";
    target = Shape{1, 28, 28};
  } else if (dataset_name == "cifar10" || dataset_name == "cifar10-subset") {
    source = "cifar100-subset";
    target = Shape{3, 32, 32};
  } else {
    throw std::invalid_argument("no surrogate mapping for dataset: " + dataset_name);
  }

  Dataset src = load_dataset(source, root);
  LabeledImageSet out;
  out.images = resize_to(src.train.images, target);
  out.labels.clear();  // adversary collects these unlabeled
  out.provenance = Provenance::surrogate;
  out.num_classes = 0;
  return out;
}

void export_png_images(const LabeledImageSet& set, const std::vector<int>& indices,
                       const fs::path& dir, const std::string& prefix) {
  fs::create_directories(dir);
  for (int idx : indices) {
    if (idx < 0 || idx >= set.size()) throw std::out_of_range("export_png_images index");
    write_png(dir / (prefix + std::to_string(idx) + ".png"), set.images, idx);
  }
}

}  // namespace wmbench
