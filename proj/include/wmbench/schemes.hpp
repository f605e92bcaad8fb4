#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmbench/data.hpp"
#include "wmbench/model.hpp"
#include "wmbench/tensor.hpp"

namespace wmbench {

// The ten trigger-set watermarking schemes under test. Each one produces a
// set of key images plus target labels and embeds it by training; they
// differ in where the keys come from and how labels are assigned.
enum class SchemeId {
  content,    // source-class images with a text glyph superimposed, one target label
  noise,      // source-class images plus gaussian noise, one target label
  unrelated,  // images from an out-of-task pool, one target label
  mark,       // source-class images carrying a signature-derived bit pattern
  abstract,   // procedural abstract images, random labels
  adv,        // FGSM-perturbed training images, ground-truth labels
  passport,   // abstract keys on a passport-layer network, multi-task embed
  encoder,    // GAN-autoencoder reconstructions of training images, random labels
  exp,        // verbatim training images relabeled away from ground truth
  deepsigns,  // uniform-random images the pretrained model gets wrong
};

SchemeId scheme_from_string(const std::string& s);
std::string to_string(SchemeId s);
const std::vector<SchemeId>& all_schemes();

// Schemes whose embedding trains a fresh model on train + trigger; the rest
// fine-tune a pretrained model (passport trains fresh with its own arch).
bool scheme_embeds_from_scratch(SchemeId s);

struct TriggerGenParams {
  int num_keys = 100;
  uint64_t seed = 1;
  int num_classes = 0;   // 0 = take it from the source set
  int source_class = -1; // content/noise/mark; -1 = seeded pick
  int target_label = -1; // single-label schemes; -1 = seeded pick != source
  float noise_sigma = 0.1f;      // noise scheme and mark pattern amplitude
  float epsilon = 0.1f;          // FGSM step for the adv scheme
  std::string glyph_text = "TEST";
  std::string owner_signature = "owner";
  int gan_epochs = 8;            // encoder scheme synthesis budget
  int encoder_fit_images = 1000;  // training slice for the encoder scheme's GAN
  int deepsigns_max_resample = 1000;  // per-key rejection cap
};

struct TriggerSet {
  Tensor key_images;  // values on the 8-bit grid so PNG archives round-trip
  std::vector<int> target_labels;
  SchemeId scheme = SchemeId::content;
  nlohmann::json gen_params;

  int size() const { return key_images.n; }
};

// (1-M)*x + M*C elementwise. C and M may be a single image broadcast over
// the batch. Inputs are expected in [0,1]; with M in [0,1] the result is too.
Tensor superimpose(const Tensor& x, const Tensor& content, const Tensor& mask);

// Renders `text` in a compact 3x5-per-glyph font into the top-left corner.
// content gets white strokes, mask gets 1.0 on stroke pixels; both are a
// single image of the given shape. Throws on characters outside A-Z0-9 or
// text that does not fit.
void render_text_overlay(Shape shape, const std::string& text, Tensor* content, Tensor* mask);

// Procedural out-of-distribution pool: gradient backgrounds with random
// filled polygons and ellipses. Deterministic in (shape, n, seed).
Tensor render_abstract_pool(Shape shape, int n, uint64_t seed);

// Builds the key images and target labels for one scheme.
//   sources: the owner training set (content/noise/mark filter it by class;
//            adv/exp/encoder sample it; others ignore the images).
//   pool:    out-of-task images; required for unrelated, optional override
//            for abstract/passport (default is the procedural pool).
//   model0:  pretrained task model; required for adv, deepsigns, and exp.
TriggerSet generate_trigger_set(SchemeId scheme, const LabeledImageSet& sources,
                                const LabeledImageSet* pool, const ClassifierModel* model0,
                                const TriggerGenParams& params);

struct WatermarkedModel {
  ClassifierModel model;
  TriggerSet trigger;
  TrainSpec embed_spec;
  double embed_recall = 0.0;    // trigger recall right after embedding
  double embed_test_acc = 0.0;  // test accuracy right after embedding
  TrainHistory history;
};

struct EmbedOptions {
  const ClassifierModel* pretrained = nullptr;  // required for mark/adv/exp
  double ew_theta = 1.0;                        // exp scheme exponent
  int trigger_repeat = 1;  // how many copies of the trigger join the training mix
};

// Trains a model that carries the trigger set: from scratch on train+trigger
// for content/noise/unrelated/abstract/deepsigns/encoder, fine-tuning
// opt.pretrained for mark/adv (and exp via the exponential-weighting path),
// and multi-task over both passport modes for passport.
WatermarkedModel embed_watermark(const LabeledImageSet& train, const LabeledImageSet& test,
                                 const TriggerSet& trigger, Arch arch, const TrainSpec& spec,
                                 const EmbedOptions& opt = {});

// Fine-tunes model0 on train+trigger with the exponential weighting
// transform (exponent theta > 0) active, then bakes the transform into the
// weights so the returned model carries the amplified parameters.
ClassifierModel exponential_weighting_train(const ClassifierModel& model0,
                                            const LabeledImageSet& train,
                                            const TriggerSet& trigger, double theta,
                                            const TrainSpec& spec);

// Passport-architecture classifier with seeded random passports bound.
ClassifierModel build_passport_model(int num_classes, Shape input_shape, uint64_t weight_seed,
                                     uint64_t passport_seed);

// Fraction of key images classified as their target labels (exact count).
// Passport models are switched to inserted-passport mode first, the mode
// ownership verification runs in.
double trigger_recall(ClassifierModel& model, const TriggerSet& trigger);
double trigger_recall(WatermarkedModel& wm);

// Directory archive: keys/<idx>.png + labels.csv + meta.json. Key images
// are 8-bit quantized at generation, so save/load round-trips bit-exactly.
void save_trigger_set(const TriggerSet& ts, const std::filesystem::path& dir);
TriggerSet load_trigger_set(const std::filesystem::path& dir);

}  // namespace wmbench
