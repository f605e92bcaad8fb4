#pragma once
// Scheme-aware surrogate trigger synthesis and the attacks it strengthens.
// An adversary with white-box access to a watermarked model trains small
// U-Net synthesizers whose outputs (a) look like what the scheme's own key
// generator would produce and (b) are classified as an attacker-chosen
// target label. Those surrogate keys, relabeled away from their targets,
// then join fine-tuning, stealing, and an activation-guided pruning attack.

#include <filesystem>
#include <memory>
#include <vector>

#include "json.hpp"
#include "wmbench/removal.hpp"
#include "wmbench/schemes.hpp"
#include "wmbench/synthnets.hpp"

namespace wmbench {

struct SynthTrainSpec {
  int epochs = 6;
  int batch_size = 32;
  double lr = 1e-3;
  double lr_disc = 1e-3;    // discriminator, exp/encoder modes only
  float epsilon = 0.1f;     // adv mode perturbation budget
  float noise_sigma = 0.1f; // noise/mark target sampler amplitude
  int keys_per_class = 50;  // surrogate pairs collected per target label (0 = all sources)
  uint64_t seed = 1;
};

// One trained synthesizer aimed at a single target label. content mode keeps
// two networks (content and mask), adv mode keeps none, every other scheme
// keeps exactly one.
struct AdaptiveSynth {
  SchemeId scheme = SchemeId::content;
  int target_label = 0;
  double lambda = 1.0;
  double gamma = 0.01;
  float epsilon = 0.1f;
  std::vector<std::unique_ptr<SynthUNet>> nets;
  std::unique_ptr<Sequential> discriminator;  // exp/encoder co-training only
  // Per-epoch means of the two objective terms and their weighted sum;
  // loss_total[i] always equals loss_ae[i] + lambda * loss_fool[i].
  std::vector<double> loss_total, loss_ae, loss_fool;
};

// Surrogate keys paired with the exact sources they were synthesized from.
// For removal use every assigned label differs from the pair's target.
struct SurrogateTriggerSet {
  Tensor source_images;
  Tensor images;  // values on the 8-bit grid, like real trigger archives
  std::vector<int> target_labels;
  std::vector<int> assigned_labels;
  SchemeId scheme = SchemeId::content;
  nlohmann::json meta;

  int size() const { return images.n; }
};

// Minimizes L = L_ae + lambda * L_f(target, f(x')) over the synthesizer
// parameters, with the watermarked model frozen. L_ae by scheme:
//   content    MSE(C, C') + gamma * mean|M'| with x' = (1-M')x + M'C' and C
//              drawn as random glyph overlays
//   noise/mark MSE(Z, Z') with x' = x + Z' and Z from the scheme's sampler
//   exp/encoder MSE(x, x') + gamma * (discriminator fooling loss), the
//              discriminator co-trained to separate sources from outputs
//   abstract/passport  MSE on a procedural abstract pool (sources ignored)
//   deepsigns  MSE on uniform random images (sources ignored)
//   unrelated  MSE on the given sources, expected to be an out-of-task pool
//   adv        no training at all; keys are gradient-sign steps at synthesis
// Sources for the non-pool schemes are the adversary's test share.
AdaptiveSynth train_synth(SchemeId scheme, const WatermarkedModel& wm,
                          const LabeledImageSet& sources, int target_label, double lambda,
                          double gamma, const SynthTrainSpec& spec);

// Runs the synthesizer on fresh sources; adv mode instead takes a gradient
// step against `model` toward the synth's target label. Outputs are raw
// floats; callers quantize when archiving.
Tensor synth_keys(AdaptiveSynth& synth, const ClassifierModel& model, const Tensor& sources);

// Fraction of synthesized keys the model classifies as the synth's target.
double fooling_rate(AdaptiveSynth& synth, const ClassifierModel& model, const Tensor& sources);

// Trains one synth per class, collects its keys for the given sources, and
// assigns each pair a uniform random label different from its target.
SurrogateTriggerSet synth_trigger_pairs(const WatermarkedModel& wm, SchemeId scheme,
                                        const LabeledImageSet& sources, double lambda,
                                        double gamma, const SynthTrainSpec& spec,
                                        uint64_t label_seed);

// finetune_attack / steal_attack with the surrogate pairs appended to the
// training mix under their assigned labels. An empty surrogate set reproduces
// the plain attack bit for bit.
AttackOutcome adaptive_finetune(const WatermarkedModel& wm, const LabeledImageSet& adv_data,
                                const LabeledImageSet& surrogate,
                                const LabeledImageSet& eval_test, const SurrogateTriggerSet& st,
                                const TrainSpec& spec);
AttackOutcome adaptive_steal(const WatermarkedModel& wm, const LabeledImageSet& surrogate,
                             const LabeledImageSet& adv_data, const LabeledImageSet& eval_test,
                             const SurrogateTriggerSet& st, Arch arch, const TrainSpec& spec);

// Prunes the percent of fully connected weights whose downstream neuron
// shows the largest mean absolute activation difference between the paired
// source and surrogate batches. No retraining. post_activation switches the
// probe point from the dense output to the following nonlinearity's output.
AttackOutcome adaptive_prune(const WatermarkedModel& wm, const LabeledImageSet& eval_test,
                             const SurrogateTriggerSet& st, int percent,
                             bool post_activation = false);

// Same reporting rule as prune_sweep: lowest surviving recall among cells
// within the accuracy budget.
AttackOutcome adaptive_prune_sweep(const WatermarkedModel& wm, const LabeledImageSet& eval_test,
                                   const SurrogateTriggerSet& st,
                                   const std::vector<int>& percents, double max_acc_drop = 0.05);

// Archive layout mirrors trigger sets (keys/*.png, labels.csv, meta.json)
// plus assigned_labels.csv, y_t.csv, and the paired sources under sources/.
void save_surrogate_set(const SurrogateTriggerSet& st, const std::filesystem::path& dir);
SurrogateTriggerSet load_surrogate_set(const std::filesystem::path& dir);

}  // namespace wmbench
