#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "wmbench/data.hpp"
#include "wmbench/fixture.hpp"
#include "wmbench/pngio.hpp"
#include "wmbench/util.hpp"

using namespace wmbench;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

FixtureSpec tiny_spec() {
  FixtureSpec s;
  s.mnist_train = 60;
  s.mnist_test = 30;
  s.fashion_train = 40;
  s.fashion_test = 20;
  s.cifar_train = 50;
  s.cifar_test = 20;
  s.cifar100_train = 40;
  s.cifar100_test = 10;
  s.seed = 99;
  return s;
}

void gzip_file(const fs::path& src, const fs::path& dst) {
  std::ifstream is(src, std::ios::binary);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  z_stream zs{};
  REQUIRE(deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) == Z_OK);
  std::vector<unsigned char> out(compressBound(static_cast<uLong>(raw.size())) + 64);
  zs.next_in = raw.data();
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  REQUIRE(deflate(&zs, Z_FINISH) == Z_STREAM_END);
  out.resize(out.size() - zs.avail_out);
  deflateEnd(&zs);
  std::ofstream os(dst, std::ios::binary);
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace

TEST_CASE("png round trip is bit exact for quantized images") {
  auto dir = fresh_dir("wmbench_png_test");
  auto rng = make_rng(5);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);

  for (int ch : {1, 3}) {
    Tensor img(2, ch, 9, 7);
    for (auto& v : img.data) v = quantize8(d(rng));
    const fs::path p = dir / ("img" + std::to_string(ch) + ".png");
    write_png(p, img, 1);
    Tensor back = read_png(p);
    CHECK(back.n == 1);
    CHECK(back.c == ch);
    CHECK(back.h == 9);
    CHECK(back.w == 7);
    const float* orig = img.sample(1);
    for (size_t i = 0; i < back.data.size(); i++) CHECK(back.data[i] == orig[i]);
  }
}

TEST_CASE("png writer quantizes to the nearest 8-bit level") {
  auto dir = fresh_dir("wmbench_png_q_test");
  Tensor img(1, 1, 2, 2);
  img.data = {0.4999f, 1.7f, -0.3f, 0.5020f};
  write_png(dir / "q.png", img);
  Tensor back = read_png(dir / "q.png");
  CHECK(back.data[0] == quantize8(0.4999f));
  CHECK(back.data[1] == 1.0f);
  CHECK(back.data[2] == 0.0f);
  CHECK(back.data[3] == quantize8(0.5020f));
}

TEST_CASE("png reader rejects garbage") {
  auto dir = fresh_dir("wmbench_png_bad_test");
  std::ofstream(dir / "bad.png") << "this is not a png at all";
  CHECK_THROWS(read_png(dir / "bad.png"));
  CHECK_THROWS(read_png(dir / "missing.png"));
}

TEST_CASE("fixture corpus loads through the canonical-format loaders") {
  auto dir = fresh_dir("wmbench_fixture_test");
  const auto spec = tiny_spec();
  CHECK(write_fixture_corpus(dir, spec));
  CHECK(is_fixture_corpus(dir));
  // Identical spec: no rewrite. Different spec: regenerates.
  CHECK_FALSE(write_fixture_corpus(dir, spec));
  auto spec2 = spec;
  spec2.seed = 100;
  CHECK(write_fixture_corpus(dir, spec2));

  Dataset mnist = load_dataset("mnist", dir);
  CHECK(mnist.train.size() == 60);
  CHECK(mnist.test.size() == 30);
  CHECK(mnist.num_classes == 10);
  CHECK(mnist.train.images.c == 1);
  CHECK(mnist.train.images.h == 28);
  CHECK(mnist.train.images.w == 28);
  CHECK(mnist.train.provenance == Provenance::owner_train);
  CHECK(mnist.test.provenance == Provenance::test_pool);
  for (int y : mnist.train.labels) {
    CHECK(y >= 0);
    CHECK(y < 10);
  }
  // Pixels decode straight from bytes, so every value sits on the 8-bit grid.
  for (float v : mnist.train.images.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    CHECK(v == quantize8(v));
  }

  Dataset fashion = load_dataset("fashion-mnist", dir);
  CHECK(fashion.train.size() == 40);

  Dataset c10 = load_dataset("cifar10", dir);
  CHECK(c10.train.size() == 50);
  CHECK(c10.train.images.c == 3);
  CHECK(c10.num_classes == 10);

  // The subset variant takes a prefix; with a small corpus that is everything.
  Dataset c10s = load_dataset("cifar10-subset", dir);
  CHECK(c10s.train.size() == 50);

  Dataset c100 = load_dataset("cifar100", dir);
  CHECK(c100.train.size() == 40);
  CHECK(c100.num_classes == 100);

  CHECK_THROWS_WITH_AS(load_dataset("svhn", dir), doctest::Contains("unsupported dataset"),
                       std::invalid_argument);
  CHECK_THROWS(load_dataset("mnist", dir / "nowhere"));
}

TEST_CASE("idx loader accepts gzip archives") {
  auto dir = fresh_dir("wmbench_gz_test");
  write_fixture_corpus(dir, tiny_spec());
  Dataset plain = load_dataset("mnist", dir);

  for (const char* stem : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                           "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
    const fs::path p = dir / "mnist" / stem;
    gzip_file(p, fs::path(p.string() + ".gz"));
    fs::remove(p);
  }
  Dataset gz = load_dataset("mnist", dir);
  CHECK(gz.train.images.data == plain.train.images.data);
  CHECK(gz.train.labels == plain.train.labels);
  CHECK(gz.test.images.data == plain.test.images.data);
}

TEST_CASE("adversary split is disjoint, exhaustive, and seed-deterministic") {
  // Unique pixel per sample makes membership tracking trivial.
  LabeledImageSet test;
  const int n = 200;
  test.images = Tensor(n, 1, 2, 2);
  test.labels.resize(n);
  test.num_classes = 10;
  test.provenance = Provenance::test_pool;
  for (int i = 0; i < n; i++) {
    test.images.sample(i)[0] = static_cast<float>(i);
    test.labels[i] = i % 10;
  }

  SplitSpec spec{0.5, 42};
  auto [adv, ev] = split_adversary_data(test, spec);
  CHECK(adv.size() == 100);
  CHECK(ev.size() == 100);
  CHECK(adv.provenance == Provenance::adv_test_half);
  CHECK(ev.provenance == Provenance::eval_test_half);

  std::set<int> seen;
  for (int i = 0; i < adv.size(); i++) seen.insert(static_cast<int>(adv.images.sample(i)[0]));
  for (int i = 0; i < ev.size(); i++) seen.insert(static_cast<int>(ev.images.sample(i)[0]));
  CHECK(seen.size() == 200);

  // Labels travel with their images.
  for (int i = 0; i < adv.size(); i++)
    CHECK(adv.labels[i] == static_cast<int>(adv.images.sample(i)[0]) % 10);

  auto [adv2, ev2] = split_adversary_data(test, spec);
  CHECK(adv2.images.data == adv.images.data);
  CHECK(ev2.labels == ev.labels);

  auto [adv3, ev3] = split_adversary_data(test, SplitSpec{0.5, 43});
  CHECK(adv3.images.data != adv.images.data);

  auto [adv4, ev4] = split_adversary_data(test, SplitSpec{0.1, 42});
  CHECK(adv4.size() == 20);
  CHECK(ev4.size() == 180);

  CHECK_THROWS(split_adversary_data(test, SplitSpec{1.5, 1}));
  CHECK_THROWS(split_adversary_data(test, SplitSpec{-0.1, 1}));
}

TEST_CASE("surrogate sources map to the out-of-task pools") {
  auto dir = fresh_dir("wmbench_surrogate_test");
  write_fixture_corpus(dir, tiny_spec());

  LabeledImageSet fashion = surrogate_source("mnist", dir);
  CHECK(fashion.size() == 40);
  CHECK_FALSE(fashion.labeled());
  CHECK(fashion.provenance == Provenance::surrogate);
  CHECK(shape_of(fashion.images) == Shape{1, 28, 28});

  LabeledImageSet c100 = surrogate_source("cifar10", dir);
  CHECK(c100.size() == 40);
  CHECK(shape_of(c100.images) == Shape{3, 32, 32});

  CHECK_THROWS(surrogate_source("svhn", dir));
}

TEST_CASE("resize adapts spatial dims and channels") {
  Tensor img(1, 3, 32, 32);
  for (auto& v : img.data) v = 0.25f;
  Tensor small = resize_to(img, Shape{1, 28, 28});
  CHECK(shape_of(small) == Shape{1, 28, 28});
  for (float v : small.data) CHECK(v == doctest::Approx(0.25f).epsilon(1e-5));

  Tensor gray(2, 1, 8, 8);
  for (int i = 0; i < 2 * 64; i++) gray.data[i] = static_cast<float>(i % 64) / 64.0f;
  Tensor rgb = resize_to(gray, Shape{3, 8, 8});
  for (int s = 0; s < 2; s++)
    for (int p = 0; p < 64; p++) {
      CHECK(rgb.sample(s)[p] == gray.sample(s)[p]);
      CHECK(rgb.sample(s)[64 + p] == gray.sample(s)[p]);
      CHECK(rgb.sample(s)[128 + p] == gray.sample(s)[p]);
    }

  // Same shape: untouched.
  Tensor same = resize_to(gray, Shape{1, 8, 8});
  CHECK(same.data == gray.data);
}

TEST_CASE("png export writes one file per requested index") {
  auto dir = fresh_dir("wmbench_export_test");
  LabeledImageSet set;
  set.images = Tensor(3, 1, 4, 4);
  for (auto& v : set.images.data) v = quantize8(0.5f);
  set.labels = {0, 1, 2};
  export_png_images(set, {0, 2}, dir / "out", "key_");
  CHECK(fs::exists(dir / "out" / "key_0.png"));
  CHECK_FALSE(fs::exists(dir / "out" / "key_1.png"));
  Tensor back = read_png(dir / "out" / "key_2.png");
  CHECK(back.data[0] == quantize8(0.5f));
}
