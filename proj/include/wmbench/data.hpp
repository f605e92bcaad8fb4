#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "wmbench/tensor.hpp"

namespace wmbench {

// Where a batch of images came from. Attacks audit these tags: a stolen
// model must never have seen owner_train or synthetic trigger images.
enum class Provenance {
  owner_train,
  test_pool,       // held-out test set before the adversary split
  adv_test_half,   // adversary's share of the test set
  eval_test_half,  // evaluation share, untouched by attacks
  surrogate,
  synthetic,
};

std::string to_string(Provenance p);

struct LabeledImageSet {
  Tensor images;            // (n, c, h, w), values in [0,1]
  std::vector<int> labels;  // empty for unlabeled pools (surrogates)
  Provenance provenance = Provenance::owner_train;
  int num_classes = 0;

  int size() const { return images.n; }
  bool labeled() const { return !labels.empty(); }

  LabeledImageSet subset(const std::vector<int>& idx) const;
};

struct Dataset {
  std::string name;
  LabeledImageSet train;
  LabeledImageSet test;
  int num_classes = 0;
};

// Loads a dataset from canonical archive files under <root>/<name>/.
// Supported names: mnist, fashion-mnist (idx format, optionally .gz),
// cifar10, cifar10-subset (binary batches), cifar100, cifar100-subset.
// Anything else is an error.
Dataset load_dataset(const std::string& name, const std::filesystem::path& root);

struct SplitSpec {
  double adversary_fraction = 0.5;
  uint64_t seed = 1;
};

// Disjoint (adversary, evaluation) partition of a test set. Deterministic
// for a fixed seed.
std::pair<LabeledImageSet, LabeledImageSet> split_adversary_data(const LabeledImageSet& test,
                                                                 const SplitSpec& spec);

// The out-of-distribution image pool an adversary would collect for the
// given task: mnist maps to fashion-mnist, cifar10 to a cifar100 subset.
// Labels are dropped; images are resized / channel-adapted if needed.
LabeledImageSet surrogate_source(const std::string& dataset_name,
                                 const std::filesystem::path& root);

// Bilinear spatial resize plus channel broadcast/average to the target
// shape. No-op when shapes already match.
Tensor resize_to(const Tensor& images, Shape target);

// Writes images[i] for each listed index as <dir>/<prefix><idx>.png.
void export_png_images(const LabeledImageSet& set, const std::vector<int>& indices,
                       const std::filesystem::path& dir, const std::string& prefix);

}  // namespace wmbench
