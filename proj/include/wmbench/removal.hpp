#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmbench/data.hpp"
#include "wmbench/model.hpp"
#include "wmbench/schemes.hpp"
#include "wmbench/synthnets.hpp"

namespace wmbench {

// Result of one removal attack on a watermarked model. Deltas are derivable
// from the before/after pairs and deliberately not stored.
struct AttackOutcome {
  ClassifierModel attacked_model;
  std::string attack_id;
  nlohmann::json params;
  double owner_recall_before = 0.0;
  double owner_recall_after = 0.0;
  double test_acc_before = 0.0;
  double test_acc_after = 0.0;
  std::optional<double> adversary_recall;
  double runtime_s = 0.0;
};

// One-object JSON record of an outcome (model omitted); scheme/dataset/seed
// ride along inside params when the caller provides them there.
nlohmann::json outcome_json(const AttackOutcome& o);

// An attack leaves the model usable as evidence only while its test accuracy
// held up: a drop of more than five points voids any ownership claim built
// on it.
bool valid_for_claims(const AttackOutcome& o);

// Pre-labeled images an attack appends verbatim to its training mix, on top
// of whatever it composes itself. Adaptive attacks feed surrogate keys
// through this; it skips the provenance audit because such images are the
// adversary's own product.
struct AttackMix {
  Tensor images;
  std::vector<int> labels;
};

// Fine-tunes the watermarked model on the adversary's data: their test-set
// share with its true labels plus the surrogate pool relabeled by querying
// the model itself. eval_test is the untouched evaluation half used for the
// accuracy bookkeeping.
AttackOutcome finetune_attack(const WatermarkedModel& wm, const LabeledImageSet& adv_data,
                              const LabeledImageSet& surrogate, const LabeledImageSet& eval_test,
                              const TrainSpec& spec, const AttackMix& extra = {});

// Trains a fresh model of the same architecture from scratch, every training
// label produced by querying the watermarked model (functionality copy). The
// input sets are audited: images tagged as owner training data or synthetic
// triggers are refused. `extra` joins under its own labels instead of
// queried ones.
AttackOutcome steal_attack(const WatermarkedModel& wm, const LabeledImageSet& surrogate,
                           const LabeledImageSet& adv_data, const LabeledImageSet& eval_test,
                           Arch arch, const TrainSpec& spec, const AttackMix& extra = {});

// Zeroes the ceil(percent/100 * |fc weights|) smallest-magnitude fully
// connected weights (ties broken by parameter coordinate order). No
// retraining.
AttackOutcome prune_attack(const WatermarkedModel& wm, const LabeledImageSet& eval_test,
                           int percent);

// Runs prune_attack across the given percents and returns the outcome with
// the lowest recall among those whose accuracy drop stays within
// max_acc_drop; if no point qualifies, the least-damaging point is returned
// (its validity flag will show the violation). params records the sweep.
AttackOutcome prune_sweep(const WatermarkedModel& wm, const LabeledImageSet& eval_test,
                          const std::vector<int>& percents, double max_acc_drop = 0.05);

// Per-class reconstruction models plus calibrated flag thresholds. An image
// is flagged as a key when ANY metric reaches its threshold; normal means
// all three stay below.
struct KeyDetector {
  std::vector<Sequential> autoencoders;  // one per class
  Shape input_shape;
  int num_classes = 0;
  bool calibrated = false;
  double t_l1 = 0.0;
  double t_l2 = 0.0;
  double t_js = 0.0;
  double calibration_fpr = 0.0;  // achieved flag rate on the calibration set
};

struct DetectorMetrics {
  double l1 = 0.0;  // mean absolute reconstruction error per pixel
  double l2 = 0.0;  // mean squared reconstruction error per pixel
  double js = 0.0;  // Jensen-Shannon divergence (nats) of model softmax, input vs reconstruction
};

// Trains one reconstruction autoencoder per class on the adversary's regular
// images. Classes with fewer than min_per_class samples abort the build,
// naming the class.
KeyDetector build_key_detector(const LabeledImageSet& adv_data, int num_classes,
                               const ReconSpec& spec, int min_per_class = 1);

// Metric triple for one image (images.n must be 1) against the autoencoder
// of the model's predicted class. Works uncalibrated; flagging does not.
DetectorMetrics detector_metrics(KeyDetector& det, const ClassifierModel& model,
                                 const Tensor& image);

// Sets each metric threshold to the smallest observed calibration score s
// with |{scores >= s}| <= floor(fpr_bound * N) (one notch above the maximum
// when even the maximum flags too many). Calibration images should be the
// detector's own training images.
void calibrate_thresholds(KeyDetector& det, const ClassifierModel& model,
                          const LabeledImageSet& calibration, double fpr_bound);

// ANY-metric-at-threshold flag rule; throws if the detector is uncalibrated.
std::pair<bool, DetectorMetrics> detect_key_image(KeyDetector& det, const ClassifierModel& model,
                                                  const Tensor& image);

// Balanced detection accuracy over |keys| key images and an equal number of
// regular images (sizes must match exactly; baseline 0.5).
double evasion_detection_accuracy(KeyDetector& det, const ClassifierModel& model,
                                  const TriggerSet& keys, const LabeledImageSet& regulars);

// Deployment wrapper: answers each query with the model's prediction, except
// that flagged images get a seeded uniform random label instead.
std::vector<int> evasive_predict(KeyDetector& det, const ClassifierModel& model, const Tensor& images,
                                 uint64_t seed);

}  // namespace wmbench
