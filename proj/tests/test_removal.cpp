#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "wmbench/data.hpp"
#include "wmbench/fixture.hpp"
#include "wmbench/model.hpp"
#include "wmbench/removal.hpp"
#include "wmbench/schemes.hpp"
#include "wmbench/util.hpp"

using namespace wmbench;
namespace fs = std::filesystem;

namespace {

const fs::path& corpus_root() {
  static const fs::path root = [] {
    fs::path dir = fs::temp_directory_path() / "wmbench_removal_corpus";
    FixtureSpec s;
    s.mnist_train = 240;
    s.mnist_test = 80;
    s.fashion_train = 120;
    s.fashion_test = 20;
    s.cifar_train = 20;
    s.cifar_test = 10;
    s.cifar100_train = 20;
    s.cifar100_test = 10;
    s.seed = 91;
    write_fixture_corpus(dir, s);
    return dir;
  }();
  return root;
}

const Dataset& mnist() {
  static const Dataset ds = load_dataset("mnist", corpus_root());
  return ds;
}

// Adversary view of the task: half the test set for attacking, the other
// half held out for accuracy bookkeeping.
const std::pair<LabeledImageSet, LabeledImageSet>& test_split() {
  static const auto halves = split_adversary_data(mnist().test, SplitSpec{0.5, 19});
  return halves;
}

const LabeledImageSet& adv_half() { return test_split().first; }
const LabeledImageSet& eval_half() { return test_split().second; }

const LabeledImageSet& surrogate_pool() {
  static const LabeledImageSet pool = surrogate_source("mnist", corpus_root());
  return pool;
}

// One watermarked victim shared by every attack test in this file.
const WatermarkedModel& victim() {
  static const WatermarkedModel wm = [] {
    TriggerGenParams gp;
    gp.num_keys = 12;
    gp.seed = 42;
    gp.num_classes = 10;
    gp.source_class = 3;
    gp.target_label = 5;
    TriggerSet ts = generate_trigger_set(SchemeId::content, mnist().train, nullptr, nullptr, gp);
    TrainSpec spec;
    spec.epochs = 8;
    spec.seed = 13;
    EmbedOptions opt;
    opt.trigger_repeat = 4;
    return embed_watermark(mnist().train, mnist().test, ts, Arch::lenet5, spec, opt);
  }();
  return wm;
}

// Detector whose autoencoders are empty nets, so reconstruction is the
// input itself and every metric is exactly zero.
KeyDetector identity_detector(int num_classes, Shape shape) {
  KeyDetector det;
  det.input_shape = shape;
  det.num_classes = num_classes;
  for (int c = 0; c < num_classes; c++) det.autoencoders.emplace_back();
  return det;
}

// Tiny two-feature model whose fully connected weights we control exactly.
WatermarkedModel micro_victim(const std::vector<float>& weights) {
  WatermarkedModel wm;
  wm.model.arch = Arch::lenet5;
  wm.model.num_classes = 2;
  wm.model.input_shape = {1, 1, 2};
  Dense* d = wm.model.net.add<Dense>(2, 2, 3);
  REQUIRE(d->weight.v.size() == weights.size());
  std::copy(weights.begin(), weights.end(), d->weight.v.begin());
  std::fill(d->bias.v.begin(), d->bias.v.end(), 0.0f);
  wm.trigger.key_images = Tensor(1, 1, 1, 2);
  wm.trigger.key_images.data = {1.0f, 0.0f};
  wm.trigger.target_labels = {0};
  return wm;
}

LabeledImageSet micro_eval() {
  LabeledImageSet ev;
  ev.images = Tensor(2, 1, 1, 2);
  ev.images.data = {1.0f, 0.0f, 0.0f, 1.0f};
  ev.labels = {0, 1};
  ev.provenance = Provenance::eval_test_half;
  return ev;
}

}  // namespace

TEST_CASE("pruning zeroes the smallest magnitudes first") {
  // weights 0.1, -0.05, 0.3, 0.2 at 50 percent: -0.05 and 0.1 go
  WatermarkedModel wm = micro_victim({0.1f, -0.05f, 0.3f, 0.2f});
  AttackOutcome out = prune_attack(wm, micro_eval(), 50);
  std::vector<Param*> fc = out.attacked_model.fc_weight_params();
  REQUIRE(fc.size() == 1);
  CHECK(fc[0]->v[0] == 0.0f);
  CHECK(fc[0]->v[1] == 0.0f);
  CHECK(fc[0]->v[2] == 0.3f);
  CHECK(fc[0]->v[3] == 0.2f);
  CHECK(out.params.at("zeroed") == 2);
  CHECK(out.attacked_model.removal_tag == "prune");
}

TEST_CASE("pruning matches a brute-force reimplementation") {
  const WatermarkedModel& wm = victim();
  const int percent = 37;
  AttackOutcome out = prune_attack(wm, eval_half(), percent);

  // independent selection: sort every fc coordinate by (|w|, layer, index)
  ClassifierModel copy = wm.model;
  std::vector<Param*> fc = copy.fc_weight_params();
  struct E {
    float mag;
    int pi, idx;
  };
  std::vector<E> all;
  long long total = 0;
  for (int pi = 0; pi < static_cast<int>(fc.size()); pi++) {
    total += static_cast<long long>(fc[pi]->v.size());
    for (int i = 0; i < static_cast<int>(fc[pi]->v.size()); i++)
      all.push_back({std::abs(fc[pi]->v[i]), pi, i});
  }
  std::stable_sort(all.begin(), all.end(), [](const E& a, const E& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    if (a.pi != b.pi) return a.pi < b.pi;
    return a.idx < b.idx;
  });
  const long long k = (static_cast<long long>(percent) * total + 99) / 100;
  for (long long i = 0; i < k; i++) fc[all[i].pi]->v[all[i].idx] = 0.0f;

  std::vector<Param*> pruned = out.attacked_model.fc_weight_params();
  for (size_t pi = 0; pi < fc.size(); pi++)
    for (size_t i = 0; i < fc[pi]->v.size(); i++) REQUIRE(pruned[pi]->v[i] == fc[pi]->v[i]);
  CHECK(out.params.at("zeroed") == k);
}

TEST_CASE("pruning zero percent leaves the model bit-identical") {
  AttackOutcome out = prune_attack(victim(), eval_half(), 0);
  CHECK(out.attacked_model.checksum() == victim().model.checksum());
  CHECK(out.owner_recall_after == out.owner_recall_before);
  CHECK(out.test_acc_after == out.test_acc_before);
}

TEST_CASE("pruning a hundred percent clears every fc weight") {
  AttackOutcome out = prune_attack(victim(), eval_half(), 100);
  for (Param* p : out.attacked_model.fc_weight_params())
    for (float v : p->v) CHECK(v == 0.0f);
}

TEST_CASE("pruning validates the percentage") {
  CHECK_THROWS_AS(prune_attack(victim(), eval_half(), -1), std::invalid_argument);
  CHECK_THROWS_AS(prune_attack(victim(), eval_half(), 101), std::invalid_argument);
}

TEST_CASE("prune sweep reports the lowest surviving recall among acceptable cells") {
  const std::vector<int> percents{0, 20, 40, 80};
  AttackOutcome sweep = prune_sweep(victim(), eval_half(), percents, 0.05);

  bool found = false;
  double best_recall = 2.0;
  double fallback_acc = -1.0;
  int fallback_p = -1, best_p = -1;
  for (int p : percents) {
    AttackOutcome o = prune_attack(victim(), eval_half(), p);
    if (o.test_acc_after - o.test_acc_before >= -0.05 - 1e-12) {
      if (!found || o.owner_recall_after < best_recall) {
        best_recall = o.owner_recall_after;
        best_p = p;
      }
      found = true;
    } else if (o.test_acc_after > fallback_acc) {
      fallback_acc = o.test_acc_after;
      fallback_p = p;
    }
  }
  const int expect_p = found ? best_p : fallback_p;
  CHECK(sweep.params.at("percent") == expect_p);
  CHECK(sweep.params.at("swept_percents") == nlohmann::json(percents));
  if (found) CHECK(sweep.owner_recall_after == doctest::Approx(best_recall));
}

TEST_CASE("fine-tuning for zero epochs changes nothing") {
  TrainSpec spec;
  spec.epochs = 0;
  spec.seed = 4;
  AttackOutcome out = finetune_attack(victim(), adv_half(), surrogate_pool(), eval_half(), spec);
  CHECK(out.attacked_model.checksum() == victim().model.checksum());
  CHECK(out.owner_recall_after == out.owner_recall_before);
  CHECK(out.test_acc_after == out.test_acc_before);
  CHECK(out.attacked_model.removal_tag == "finetune");
}

TEST_CASE("fine-tuning rejects unusable attack data") {
  TrainSpec spec;
  spec.epochs = 1;
  LabeledImageSet empty;
  CHECK_THROWS_AS(finetune_attack(victim(), empty, empty, eval_half(), spec),
                  std::invalid_argument);

  LabeledImageSet unlabeled = adv_half();
  unlabeled.labels.clear();
  CHECK_THROWS_AS(finetune_attack(victim(), unlabeled, surrogate_pool(), eval_half(), spec),
                  std::invalid_argument);

  LabeledImageSet leaked = adv_half();
  leaked.provenance = Provenance::owner_train;
  CHECK_THROWS_AS(finetune_attack(victim(), leaked, surrogate_pool(), eval_half(), spec),
                  std::invalid_argument);
}

TEST_CASE("fine-tuning records before and after measurements") {
  TrainSpec spec;
  spec.epochs = 2;
  spec.seed = 8;
  AttackOutcome out = finetune_attack(victim(), adv_half(), surrogate_pool(), eval_half(), spec);
  CHECK(out.owner_recall_before == doctest::Approx(victim().embed_recall).epsilon(0.2));
  CHECK(out.test_acc_before > 0.5);
  CHECK(out.test_acc_after > 0.2);
  CHECK(out.attack_id == "finetune");
  nlohmann::json j = outcome_json(out);
  CHECK(j.at("recall_before") == out.owner_recall_before);
  CHECK(j.at("runtime_s").get<double>() >= 0.0);
}

TEST_CASE("stealing trains a fresh model on the victim's own answers") {
  // tiny surrogate, long budget: the copy should parrot the victim on it
  std::vector<int> idx(64);
  for (int i = 0; i < 64; i++) idx[i] = i;
  LabeledImageSet sub = surrogate_pool().subset(idx);
  sub.provenance = Provenance::surrogate;

  TrainSpec spec;
  spec.epochs = 25;
  spec.batch_size = 32;
  spec.seed = 3;
  LabeledImageSet no_extra;
  no_extra.provenance = Provenance::adv_test_half;
  AttackOutcome out = steal_attack(victim(), sub, no_extra, eval_half(), Arch::lenet5, spec);

  std::vector<int> from_victim = victim().model.predict(sub.images);
  std::vector<int> from_copy = out.attacked_model.predict(sub.images);
  int agree = 0;
  for (size_t i = 0; i < from_victim.size(); i++)
    if (from_victim[i] == from_copy[i]) agree++;
  CHECK(agree >= 54);  // 85 percent agreement on its own training queries
  CHECK(out.attacked_model.removal_tag == "steal");
  CHECK(out.attacked_model.checksum() != victim().model.checksum());
}

TEST_CASE("stealing refuses foreign architectures and tainted data") {
  TrainSpec spec;
  spec.epochs = 1;
  LabeledImageSet empty;
  CHECK_THROWS_AS(steal_attack(victim(), empty, adv_half(), eval_half(), Arch::lenet5, spec),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      steal_attack(victim(), surrogate_pool(), adv_half(), eval_half(), Arch::resnet_small, spec),
      std::invalid_argument);

  LabeledImageSet leaked = surrogate_pool();
  leaked.provenance = Provenance::owner_train;
  CHECK_THROWS_AS(steal_attack(victim(), leaked, adv_half(), eval_half(), Arch::lenet5, spec),
                  std::invalid_argument);
  LabeledImageSet keys = surrogate_pool();
  keys.provenance = Provenance::synthetic;
  CHECK_THROWS_AS(steal_attack(victim(), keys, adv_half(), eval_half(), Arch::lenet5, spec),
                  std::invalid_argument);
}

TEST_CASE("claim validity hinges on a five-point accuracy budget") {
  AttackOutcome o;
  o.test_acc_before = 0.90;
  o.test_acc_after = 0.85;
  CHECK(valid_for_claims(o));  // exactly at the budget still counts
  o.test_acc_after = 0.8499;
  CHECK_FALSE(valid_for_claims(o));
  o.test_acc_after = 0.95;
  CHECK(valid_for_claims(o));
}

TEST_CASE("a perfect reconstruction scores zero on every metric") {
  KeyDetector det = identity_detector(10, {1, 28, 28});
  const Tensor img = mnist().test.images.gather({0});
  DetectorMetrics m = detector_metrics(det, victim().model, img);
  CHECK(m.l1 == 0.0);
  CHECK(m.l2 == 0.0);
  CHECK(m.js == 0.0);

  det.calibrated = true;
  det.t_l1 = det.t_l2 = det.t_js = 1e-12;
  CHECK_FALSE(detect_key_image(det, victim().model, img).first);
}

TEST_CASE("detector metrics agree with the reference divergence") {
  static KeyDetector det = build_key_detector(adv_half(), 10, ReconSpec{4, 16, 1e-3, 5}, 1);
  const Tensor img = eval_half().images.gather({1});
  DetectorMetrics m = detector_metrics(det, victim().model, img);

  const int cls = victim().model.predict(img)[0];
  Tensor recon = det.autoencoders[cls].forward(img, false);
  for (float& v : recon.data) v = clampf(v, 0.0f, 1.0f);
  double l1 = 0.0, l2 = 0.0;
  for (size_t i = 0; i < img.data.size(); i++) {
    l1 += std::abs(static_cast<double>(img.data[i]) - recon.data[i]);
    l2 += (static_cast<double>(img.data[i]) - recon.data[i]) *
          (static_cast<double>(img.data[i]) - recon.data[i]);
  }
  CHECK(m.l1 == doctest::Approx(l1 / img.data.size()).epsilon(1e-12));
  CHECK(m.l2 == doctest::Approx(l2 / img.data.size()).epsilon(1e-12));

  Tensor p = victim().model.predict_probs(img);
  Tensor q = victim().model.predict_probs(recon);
  std::vector<double> pv(p.data.begin(), p.data.end());
  std::vector<double> qv(q.data.begin(), q.data.end());
  CHECK(m.js == doctest::Approx(oracle::js_divergence(pv, qv)).epsilon(1e-9));
}

TEST_CASE("divergence between prob vectors is symmetric, bounded, zero on equality") {
  auto rng = make_rng(404);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 50; trial++) {
    std::vector<double> p(10), q(10);
    double sp = 0, sq = 0;
    for (int i = 0; i < 10; i++) {
      p[i] = u(rng);
      q[i] = u(rng);
      sp += p[i];
      sq += q[i];
    }
    for (int i = 0; i < 10; i++) {
      p[i] /= sp;
      q[i] /= sq;
    }
    const double pq = oracle::js_divergence(p, q);
    CHECK(pq == doctest::Approx(oracle::js_divergence(q, p)).epsilon(1e-12));
    CHECK(pq >= 0.0);
    CHECK(pq <= std::log(2.0) + 1e-12);
    CHECK(oracle::js_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-15));
  }
  // disjoint supports sit exactly at the ln 2 ceiling
  std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
  CHECK(oracle::js_divergence(a, b) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("detector construction demands coverage of every class") {
  LabeledImageSet missing = adv_half();
  std::vector<int> keep;
  for (int i = 0; i < missing.size(); i++)
    if (missing.labels[i] != 3) keep.push_back(i);
  missing = missing.subset(keep);
  bool threw = false;
  try {
    build_key_detector(missing, 10, ReconSpec{1, 16, 1e-3, 5}, 1);
  } catch (const std::invalid_argument& e) {
    threw = true;
    CHECK(std::string(e.what()).find("class 3") != std::string::npos);
  }
  CHECK(threw);

  LabeledImageSet unlabeled = adv_half();
  unlabeled.labels.clear();
  CHECK_THROWS_AS(build_key_detector(unlabeled, 10, ReconSpec{1, 16, 1e-3, 5}, 1),
                  std::invalid_argument);
}

TEST_CASE("detector metrics validate their input") {
  KeyDetector det = identity_detector(10, {1, 28, 28});
  CHECK_THROWS_AS(detector_metrics(det, victim().model, mnist().test.images.gather({0, 1})),
                  std::invalid_argument);
  Tensor wrong(1, 1, 14, 14);
  CHECK_THROWS_AS(detector_metrics(det, victim().model, wrong), std::invalid_argument);
  CHECK_THROWS_AS(detect_key_image(det, victim().model, mnist().test.images.gather({0})),
                  std::runtime_error);  // never calibrated
}

TEST_CASE("calibration pins thresholds to order statistics of observed scores") {
  static KeyDetector det = build_key_detector(adv_half(), 10, ReconSpec{4, 16, 1e-3, 5}, 1);
  const LabeledImageSet& cal = eval_half();
  const int n = cal.size();

  std::vector<double> l1(n), l2(n), js(n);
  for (int i = 0; i < n; i++) {
    DetectorMetrics m = detector_metrics(det, victim().model, cal.images.gather({i}));
    l1[i] = m.l1;
    l2[i] = m.l2;
    js[i] = m.js;
  }

  SUBCASE("a permissive bound lets every score through") {
    KeyDetector d = det;
    calibrate_thresholds(d, victim().model, cal, 1.0);
    CHECK(d.t_l1 == *std::min_element(l1.begin(), l1.end()));
    CHECK(d.t_l2 == *std::min_element(l2.begin(), l2.end()));
    CHECK(d.t_js == *std::min_element(js.begin(), js.end()));
    CHECK(d.calibration_fpr <= 1.0);
  }

  SUBCASE("a bound below one count sits one notch above the maximum") {
    KeyDetector d = det;
    calibrate_thresholds(d, victim().model, cal, 0.5 / n);  // floor gives zero allowed
    CHECK(d.t_l1 == std::nextafter(*std::max_element(l1.begin(), l1.end()),
                                   std::numeric_limits<double>::infinity()));
    CHECK(d.calibration_fpr == 0.0);
    // even the worst calibration image stays unflagged
    int worst = static_cast<int>(std::max_element(l1.begin(), l1.end()) - l1.begin());
    CHECK_FALSE(detect_key_image(d, victim().model, cal.images.gather({worst})).first);
  }

  SUBCASE("a ten percent bound flags at most that fraction, verified by count") {
    KeyDetector d = det;
    calibrate_thresholds(d, victim().model, cal, 0.1);
    const long long allowed = static_cast<long long>(std::floor(0.1 * n));
    for (const auto& [scores, t] :
         {std::pair{&l1, d.t_l1}, std::pair{&l2, d.t_l2}, std::pair{&js, d.t_js}}) {
      long long flagged = 0;
      for (double s : *scores)
        if (s >= t) flagged++;
      CHECK(flagged <= allowed);
      CHECK(flagged >= 1);  // smallest qualifying threshold, not a looser one
    }
    CHECK(d.calibration_fpr <= 0.1);
  }

  SUBCASE("nonsense bounds are rejected") {
    KeyDetector d = det;
    CHECK_THROWS_AS(calibrate_thresholds(d, victim().model, cal, 0.0), std::invalid_argument);
    LabeledImageSet empty;
    CHECK_THROWS_AS(calibrate_thresholds(d, victim().model, empty, 0.1), std::invalid_argument);
  }
}

TEST_CASE("trigger keys reconstruct worse than clean task images") {
  // detector fitted on plain digits; glyph-stamped keys should stand out
  static KeyDetector det = build_key_detector(mnist().train, 10, ReconSpec{8, 32, 1e-3, 5}, 1);
  const TriggerSet& keys = victim().trigger;

  double key_l2 = 0.0;
  for (int i = 0; i < keys.size(); i++)
    key_l2 += detector_metrics(det, victim().model, keys.key_images.gather({i})).l2;
  key_l2 /= keys.size();

  double clean_l2 = 0.0;
  const int n_clean = eval_half().size();
  for (int i = 0; i < n_clean; i++)
    clean_l2 += detector_metrics(det, victim().model, eval_half().images.gather({i})).l2;
  clean_l2 /= n_clean;

  CHECK(key_l2 > clean_l2);
}

TEST_CASE("evasion accuracy is balanced over keys and regulars") {
  KeyDetector det = identity_detector(10, {1, 28, 28});
  det.calibrated = true;
  det.t_l1 = det.t_l2 = det.t_js = 1e-9;  // identity recon never reaches these

  const TriggerSet& keys = victim().trigger;
  std::vector<int> idx(keys.size());
  for (int i = 0; i < keys.size(); i++) idx[i] = i;
  LabeledImageSet regulars = eval_half().subset(idx);

  // nothing flags: every key missed, every regular passed, accuracy one half
  CHECK(evasion_detection_accuracy(det, victim().model, keys, regulars) == 0.5);

  det.t_l1 = det.t_l2 = det.t_js = -1.0;  // now everything flags
  CHECK(evasion_detection_accuracy(det, victim().model, keys, regulars) == 0.5);

  LabeledImageSet lopsided = eval_half();
  CHECK_THROWS_AS(evasion_detection_accuracy(det, victim().model, keys, lopsided),
                  std::invalid_argument);
}

TEST_CASE("an evasive model answers flagged queries with random labels") {
  KeyDetector det = identity_detector(10, {1, 28, 28});
  det.calibrated = true;

  const Tensor queries = mnist().test.images.gather({0, 1, 2, 3, 4, 5, 6, 7});

  det.t_l1 = det.t_l2 = det.t_js = 1e9;  // nothing flags
  CHECK(evasive_predict(det, victim().model, queries, 7) == victim().model.predict(queries));

  det.t_l1 = det.t_l2 = det.t_js = -1.0;  // everything flags
  std::vector<int> noisy = evasive_predict(det, victim().model, queries, 7);
  CHECK(noisy == evasive_predict(det, victim().model, queries, 7));  // seeded
  for (int l : noisy) {
    CHECK(l >= 0);
    CHECK(l < 10);
  }
  CHECK(noisy != victim().model.predict(queries));
}
