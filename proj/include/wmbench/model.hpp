#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wmbench/nn.hpp"
#include "wmbench/tensor.hpp"

namespace wmbench {

enum class Arch { lenet5, resnet_small, resnet18_passport };

Arch arch_from_string(const std::string& s);
std::string to_string(Arch a);

struct TrainSpec {
  OptimKind optimizer = OptimKind::adam;
  double learning_rate = 1e-3;
  int epochs = 10;
  int batch_size = 64;
  uint64_t seed = 1;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
};

class ClassifierModel {
 public:
  Arch arch = Arch::lenet5;
  int num_classes = 0;
  Shape input_shape;
  Sequential net;
  // Removal attacks stamp the model they produce; claim scenarios refuse to
  // run on models that never went through one unless explicitly overridden.
  std::string removal_tag;

  Tensor forward(const Tensor& x, bool train = false) { return net.forward(x, train); }
  std::vector<int> predict(const Tensor& x) const;
  Tensor predict_probs(const Tensor& x) const;

  std::vector<Param*> params() { return net.params(); }
  std::vector<const Param*> params() const;

  // Index of fully-connected weight matrices (biases excluded), the
  // parameter population that magnitude pruning operates on.
  std::vector<Param*> fc_weight_params();

  bool has_passport_layers() const;
  void set_passport_mode(PassportMode m);
  void set_ew_theta(double theta);
  void bake_ew();

  uint64_t checksum() const;
};

ClassifierModel build_classifier(Arch arch, int num_classes, Shape input_shape, uint64_t seed);

// Generates seeded random passport planes shaped to each passport layer's
// input and binds them. The model must contain passport layers.
void bind_random_passports(ClassifierModel& model, uint64_t seed);

TrainHistory train_classifier(ClassifierModel& model, const Tensor& images,
                              const std::vector<int>& labels, const TrainSpec& spec);

double evaluate_accuracy(const ClassifierModel& model, const Tensor& images,
                         const std::vector<int>& labels);

// d(mean cross-entropy)/d(input) at the given labels.
Tensor input_gradient(const ClassifierModel& model, const Tensor& x, const std::vector<int>& labels);

void checkpoint_save(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel checkpoint_load(const std::filesystem::path& path);

}  // namespace wmbench
