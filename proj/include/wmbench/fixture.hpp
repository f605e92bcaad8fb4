#pragma once

#include <cstdint>
#include <filesystem>

namespace wmbench {

// Procedural stand-in corpus for offline runs, written in the exact archive
// formats the loaders expect (idx for the mnist family, binary batches for
// the cifar family). Ten visually distinct grayscale glyph classes play the
// digit role, ten texture classes form the out-of-distribution pool, and two
// color-shape families cover the 32x32 datasets. All pixels are seeded,
// 8-bit, and classes are separable by a small convnet.
struct FixtureSpec {
  int mnist_train = 8000;
  int mnist_test = 2000;
  int fashion_train = 8000;
  int fashion_test = 1000;
  int cifar_train = 6000;
  int cifar_test = 1500;
  int cifar100_train = 6000;
  int cifar100_test = 500;
  uint64_t seed = 1234;
};

// Writes the corpus under root (mnist/, fashion-mnist/, cifar10/, cifar100/)
// plus a manifest recording the generation parameters. If a manifest with
// identical parameters is already present the corpus is left untouched.
// Returns true when archives were (re)written.
bool write_fixture_corpus(const std::filesystem::path& root, const FixtureSpec& spec);

// True if the directory holds a generated fixture corpus (vs. real archives).
bool is_fixture_corpus(const std::filesystem::path& root);

}  // namespace wmbench
