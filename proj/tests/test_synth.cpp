#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "cclseg/synth.hpp"
#include "test_helpers.hpp"

using namespace cclseg;
using namespace cclseg::testing;

namespace {

SynthParams small_params() {
  SynthParams p;
  p.image_size = 32;
  p.source_subjects = 4;
  p.target_subjects = 4;
  p.aux_subjects = 3;
  p.min_slices = 6;
  p.max_slices = 8;
  return p;
}

// two-sample Kolmogorov-Smirnov statistic over pixel intensities
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  size_t ia = 0, ib = 0;
  double ks = 0;
  while (ia < a.size() && ib < b.size()) {
    if (a[ia] <= b[ib])
      ++ia;
    else
      ++ib;
    const double fa = static_cast<double>(ia) / static_cast<double>(a.size());
    const double fb = static_cast<double>(ib) / static_cast<double>(b.size());
    ks = std::max(ks, std::abs(fa - fb));
  }
  return ks;
}

}  // namespace

TEST_CASE("corpus generation determinism and validation") {
  SynthParams p = small_params();
  auto c1 = generate_corpus(p, 42);
  auto c2 = generate_corpus(p, 42);
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) {
    for (Index j = 0; j < c1[i].image.numel(); ++j)
      CHECK(c1[i].image[j] == c2[i].image[j]);
    for (Index j = 0; j < c1[i].label.numel(); ++j)
      CHECK(c1[i].label[j] == c2[i].label[j]);
  }

  auto c3 = generate_corpus(p, 43);
  bool any_diff = false;
  for (Index j = 0; j < c1[0].image.numel() && !any_diff; ++j)
    any_diff = c1[0].image[j] != c3[0].image[j];
  CHECK(any_diff);

  SynthParams bad = p;
  bad.lv_radius_min = -1;
  CHECK_THROWS(generate_corpus(bad, 1));
}

TEST_CASE("corpus structure properties") {
  SynthParams p = small_params();
  auto corpus = generate_corpus(p, 7);

  // every subject shows all 4 classes in its mid slices
  std::map<int, std::vector<const Sample*>> by_subject;
  for (const auto& s : corpus) by_subject[s.subject_id].push_back(&s);
  for (auto& [subj, slices] : by_subject) {
    std::sort(slices.begin(), slices.end(),
              [](const Sample* a, const Sample* b) { return a->slice_id < b->slice_id; });
    const Sample* mid = slices[slices.size() / 2];
    std::array<bool, 4> seen{};
    for (Index i = 0; i < mid->label.numel(); ++i) seen[mid->label[i]] = true;
    for (int k = 0; k < 4; ++k) CHECK(seen[static_cast<size_t>(k)]);
  }

  // min-max normalization: min 0, max 1 per emitted image
  for (const auto& s : corpus) {
    double lo = 1e300, hi = -1e300;
    for (Index i = 0; i < s.image.numel(); ++i) {
      lo = std::min(lo, s.image[i]);
      hi = std::max(hi, s.image[i]);
    }
    CHECK(lo == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(hi == doctest::Approx(1.0).epsilon(1e-6));
  }

  // the domain shift is real: KS statistic over pixels > 0.2
  std::vector<double> src_px, tgt_px;
  for (const auto& s : corpus) {
    auto& dst = s.domain == Domain::source ? src_px : tgt_px;
    if (s.domain == Domain::aux) continue;
    for (Index i = 0; i < s.image.numel(); ++i) dst.push_back(s.image[i]);
  }
  CHECK(ks_statistic(src_px, tgt_px) > 0.2);

  // folds partition subjects
  for (const auto& s : corpus) CHECK(s.fold == (s.subject_id % 1000) % p.folds);
}

TEST_CASE("augmentation properties") {
  SynthParams p = small_params();
  auto corpus = generate_corpus(p, 9);
  const Sample& s = corpus[3];

  // some seed leaves the sample unchanged (all probability gates miss)
  bool found_identity = false;
  for (uint64_t seed = 0; seed < 200 && !found_identity; ++seed) {
    Sample a = augment_target_heavy(s, seed);
    bool same = true;
    for (Index i = 0; i < s.image.numel() && same; ++i) same = a.image[i] == s.image[i];
    for (Index i = 0; i < s.label.numel() && same; ++i) same = a.label[i] == s.label[i];
    found_identity = same;
  }
  CHECK(found_identity);

  // heavy augmentation changes the image for most seeds
  int changed = 0;
  for (uint64_t seed = 1000; seed < 1100; ++seed) {
    Sample a = augment_target_heavy(s, seed);
    double l1 = 0;
    for (Index i = 0; i < s.image.numel(); ++i) l1 += std::abs(a.image[i] - s.image[i]);
    if (l1 > 0) ++changed;
    // labels remain valid class ids and images stay in [0,1]
    for (Index i = 0; i < a.label.numel(); ++i) CHECK(a.label[i] < 4);
    for (Index i = 0; i < a.image.numel(); ++i) {
      CHECK(a.image[i] >= 0.0);
      CHECK(a.image[i] <= 1.0);
    }
  }
  CHECK(changed >= 90);

  // augment_source applies geometry only: label can move, intensities do not
  Sample sa = augment_source(s, 31);
  (void)sa;
  // determinism
  Sample h1 = augment_target_heavy(s, 77), h2 = augment_target_heavy(s, 77);
  for (Index i = 0; i < h1.image.numel(); ++i) CHECK(h1.image[i] == h2.image[i]);
}

TEST_CASE("split and sampler modes") {
  SynthParams p = small_params();
  auto corpus = generate_corpus(p, 11);

  for (auto mode : {ExperimentMode::oneshot, ExperimentMode::fewshot, ExperimentMode::full}) {
    CorpusSplit sp = split_corpus(corpus, 0, mode);
    // no subject leakage between train and test pools
    std::set<int> train_subjects, test_subjects;
    for (size_t i : sp.target_train) train_subjects.insert(corpus[i].subject_id);
    for (size_t i : sp.target_test) test_subjects.insert(corpus[i].subject_id);
    for (int subj : train_subjects) CHECK(test_subjects.count(subj) == 0);

    if (mode == ExperimentMode::oneshot) {
      CHECK(sp.target_train.size() == 1);
    } else if (mode == ExperimentMode::fewshot) {
      CHECK(train_subjects.size() == 1);
      CHECK(sp.target_train.size() > 1);
    }
    // style pool never contains target samples
    for (size_t i : sp.style_pool) CHECK(corpus[i].domain != Domain::target);
  }

  CorpusSplit sp = split_corpus(corpus, 0, ExperimentMode::oneshot);
  BatchSampler sampler(sp.source_train, sp.target_train, 4, 123);
  auto batches = sampler.epoch();
  CHECK(static_cast<int>(batches.size()) == sampler.batches_per_epoch());
  size_t total = 0;
  for (const auto& b : batches) {
    total += b.source.size();
    CHECK(b.source.size() <= 4);
    // oneshot: every batch carries the same target slice
    CHECK(b.target == sp.target_train[0]);
  }
  CHECK(total == sp.source_train.size());

  // fewshot: target ids all share one subject
  CorpusSplit spf = split_corpus(corpus, 0, ExperimentMode::fewshot);
  BatchSampler sf(spf.source_train, spf.target_train, 4, 123);
  for (const auto& b : sf.epoch())
    CHECK(corpus[b.target].subject_id == corpus[spf.target_train[0]].subject_id);

  CHECK_THROWS(BatchSampler({}, {0}, 4, 1));
}

TEST_CASE("corpus round trip is byte exact") {
  SynthParams p = small_params();
  auto corpus = generate_corpus(p, 21);
  const std::string dir = "/tmp/cclseg_test_corpus";
  std::filesystem::remove_all(dir);
  save_corpus(dir, corpus, p, 21);
  auto loaded = load_corpus(dir);
  REQUIRE(loaded.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].domain == corpus[i].domain);
    CHECK(loaded[i].subject_id == corpus[i].subject_id);
    CHECK(loaded[i].slice_id == corpus[i].slice_id);
    CHECK(loaded[i].fold == corpus[i].fold);
    CHECK(std::memcmp(loaded[i].image.data(), corpus[i].image.data(),
                      static_cast<size_t>(corpus[i].image.numel()) * sizeof(double)) == 0);
    CHECK(std::memcmp(loaded[i].label.data(), corpus[i].label.data(),
                      static_cast<size_t>(corpus[i].label.numel())) == 0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("onehot round trip") {
  Tensor<uint8_t> lbl({2, 3});
  lbl[0] = 0; lbl[1] = 1; lbl[2] = 2; lbl[3] = 3; lbl[4] = 1; lbl[5] = 0;
  TensorD y = onehot(lbl, 4);
  for (Index i = 0; i < 6; ++i) {
    double sum = 0;
    for (Index k = 0; k < 4; ++k) sum += y[k * 6 + i];
    CHECK(sum == 1.0);
    CHECK(y[lbl[i] * 6 + i] == 1.0);
  }
}
