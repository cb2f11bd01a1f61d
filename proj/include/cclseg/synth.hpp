#pragma once

#include <string>
#include <vector>

#include "cclseg/tensor.hpp"

// Procedural two-domain corpus: concentric cardiac-like structures (inner
// disk, surrounding ring, adjacent blob) rendered under domain-specific
// intensity maps. The source domain is clean and bright-blood-like, the
// target flips the ring/disk contrast and adds bias field + speckle, the aux
// domain sits elsewhere in appearance space and exists for style
// pretraining. Plus the affine/heavy augmentation pipelines and the
// oneshot/fewshot/full batch samplers.

namespace cclseg {

enum class Domain : int { source = 0, target = 1, aux = 2 };

inline const char* domain_name(Domain d) {
  switch (d) {
    case Domain::source: return "source";
    case Domain::target: return "target";
    default: return "aux";
  }
}
inline Domain domain_from_name(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  CCLSEG_REQUIRE(s == "aux", "unknown domain tag: " + s);
  return Domain::aux;
}

struct Sample {
  Tensor<double> image;   // [1,H,W] in [0,1], min-max normalized
  Tensor<uint8_t> label;  // [H,W] class ids, 0=background 1=ring 2=disk 3=blob
  Domain domain = Domain::source;
  int subject_id = 0;
  int slice_id = 0;
  int fold = 0;
};

struct SynthParams {
  Index image_size = 64;
  int num_classes = 4;
  int source_subjects = 8;
  int target_subjects = 8;
  int aux_subjects = 6;
  int min_slices = 8;
  int max_slices = 12;
  int folds = 5;
  double lv_radius_min = 8.0;
  double lv_radius_max = 11.5;
  double myo_thickness_min = 3.2;
  double myo_thickness_max = 5.0;

  void validate() const {
    CCLSEG_REQUIRE(image_size >= 16 && image_size % 4 == 0,
                   "SynthParams: image_size must be >=16 and divisible by 4");
    CCLSEG_REQUIRE(source_subjects >= 1 && target_subjects >= 1 && aux_subjects >= 1,
                   "SynthParams: at least one subject per domain");
    CCLSEG_REQUIRE(lv_radius_min > 0 && lv_radius_max >= lv_radius_min,
                   "SynthParams: degenerate structure radius");
    CCLSEG_REQUIRE(myo_thickness_min > 0 && myo_thickness_max >= myo_thickness_min,
                   "SynthParams: degenerate ring thickness");
    CCLSEG_REQUIRE(min_slices >= 3 && max_slices >= min_slices,
                   "SynthParams: bad slice range");
    CCLSEG_REQUIRE(folds >= 2, "SynthParams: folds >= 2");
  }

  uint64_t content_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    mix(static_cast<uint64_t>(image_size));
    mix(static_cast<uint64_t>(num_classes));
    mix(static_cast<uint64_t>(source_subjects));
    mix(static_cast<uint64_t>(target_subjects));
    mix(static_cast<uint64_t>(aux_subjects));
    mix(static_cast<uint64_t>(min_slices));
    mix(static_cast<uint64_t>(max_slices));
    mix(static_cast<uint64_t>(folds));
    auto mixd = [&mix](double d) {
      uint64_t u;
      std::memcpy(&u, &d, 8);
      mix(u);
    };
    mixd(lv_radius_min);
    mixd(lv_radius_max);
    mixd(myo_thickness_min);
    mixd(myo_thickness_max);
    return h;
  }
};

namespace detail {

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  return x;
}

inline void minmax_normalize(Tensor<double>& img) {
  double lo = img[0], hi = img[0];
  for (Index i = 0; i < img.numel(); ++i) {
    lo = std::min(lo, img[i]);
    hi = std::max(hi, img[i]);
  }
  if (hi - lo < 1e-12) return;  // constant image stays as-is
  img.vec() = (img.vec() - lo) / (hi - lo);
}

inline void separable_blur(Tensor<double>& img, Index h, Index w,
                           const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  Tensor<double> tmp({1, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int t = -r; t <= r; ++t) {
        Index xx = std::clamp<Index>(x + t, 0, w - 1);
        acc += k[static_cast<size_t>(t + r)] * img[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int t = -r; t <= r; ++t) {
        Index yy = std::clamp<Index>(y + t, 0, h - 1);
        acc += k[static_cast<size_t>(t + r)] * tmp[yy * w + x];
      }
      img[y * w + x] = acc;
    }
}

inline std::vector<double> gauss_kernel(double sigma, int radius) {
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<size_t>(i + radius)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline double bilinear_at(const Tensor<double>& img, Index h, Index w, double y,
                          double x) {
  if (y < 0 || x < 0 || y > static_cast<double>(h - 1) ||
      x > static_cast<double>(w - 1))
    return 0.0;
  const Index y0 = static_cast<Index>(std::floor(y));
  const Index x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double v00 = img[y0 * w + x0], v01 = img[y0 * w + x1];
  const double v10 = img[y1 * w + x0], v11 = img[y1 * w + x1];
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

inline uint8_t nearest_label_at(const Tensor<uint8_t>& lbl, Index h, Index w,
                                double y, double x) {
  const Index yi = static_cast<Index>(std::lround(y));
  const Index xi = static_cast<Index>(std::lround(x));
  if (yi < 0 || xi < 0 || yi >= h || xi >= w) return 0;  // background fill
  return lbl[yi * w + xi];
}

}  // namespace detail

// ---------------------------------------------------------------- generator

std::vector<Sample> generate_corpus(const SynthParams& params, uint64_t seed);

// one-hot [K,H,W] from a class map
inline Tensor<double> onehot(const Tensor<uint8_t>& label, int num_classes) {
  const Index h = label.size(0), w = label.size(1);
  Tensor<double> y({static_cast<Index>(num_classes), h, w});
  for (Index i = 0; i < h * w; ++i) {
    CCLSEG_REQUIRE(label[i] < num_classes, "onehot: label out of range");
    y[label[i] * h * w + i] = 1.0;
  }
  return y;
}

// ------------------------------------------------------------- augmentation

// Affine only (rotation +-15 deg, translation +-10%, scale 0.9-1.1),
// applied with probability 1/2; labels warp with nearest neighbor.
Sample augment_source(const Sample& s, uint64_t seed);

// The heavy pipeline, in order: affine, elastic, additive Gaussian noise,
// random rectangular dropout, Gaussian blur; each applied with probability
// 1/2. Image re-clamped to [0,1].
Sample augment_target_heavy(const Sample& s, uint64_t seed);

// ------------------------------------------------------------------ batches

enum class ExperimentMode : int { oneshot = 0, fewshot = 1, full = 2 };

inline const char* mode_name(ExperimentMode m) {
  switch (m) {
    case ExperimentMode::oneshot: return "oneshot";
    case ExperimentMode::fewshot: return "fewshot";
    default: return "full";
  }
}
inline ExperimentMode mode_from_name(const std::string& s) {
  if (s == "oneshot") return ExperimentMode::oneshot;
  if (s == "fewshot") return ExperimentMode::fewshot;
  CCLSEG_REQUIRE(s == "full", "unknown experiment mode: " + s);
  return ExperimentMode::full;
}

struct CorpusSplit {
  std::vector<size_t> source_train;  // corpus indices
  std::vector<size_t> target_train;
  std::vector<size_t> target_test;
  std::vector<size_t> source_test;
  std::vector<size_t> style_pool;  // source + aux, for the style module
};

// Subject-level split: subjects whose fold equals `fold` are test, the rest
// train; the target training pool is then narrowed by the experiment mode.
CorpusSplit split_corpus(const std::vector<Sample>& corpus, int fold,
                         ExperimentMode mode);

struct BatchTriple {
  std::vector<size_t> source;  // corpus indices
  size_t target = 0;           // single target slice (batch of one)
};

// Epoch-oriented sampler: shuffles source train slices each epoch and serves
// them in chunks; every batch carries one target slice per the oneshot
// convention.
class BatchSampler {
 public:
  BatchSampler() = default;
  BatchSampler(std::vector<size_t> source_pool, std::vector<size_t> target_pool,
               int source_bs, uint64_t seed)
      : source_pool_(std::move(source_pool)),
        target_pool_(std::move(target_pool)),
        source_bs_(source_bs),
        rng_(seed) {
    CCLSEG_REQUIRE(!source_pool_.empty(), "BatchSampler: empty source pool");
    CCLSEG_REQUIRE(!target_pool_.empty(), "BatchSampler: empty target pool");
    CCLSEG_REQUIRE(source_bs_ >= 1, "BatchSampler: source batch size >= 1");
  }

  int batches_per_epoch() const {
    return static_cast<int>((source_pool_.size() + static_cast<size_t>(source_bs_) - 1) /
                            static_cast<size_t>(source_bs_));
  }

  std::vector<BatchTriple> epoch() {
    std::vector<size_t> order = source_pool_;
    rng_.shuffle(order);
    std::vector<BatchTriple> out;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(source_bs_)) {
      BatchTriple bt;
      for (size_t i = pos; i < std::min(order.size(), pos + static_cast<size_t>(source_bs_)); ++i)
        bt.source.push_back(order[i]);
      bt.target = target_pool_[static_cast<size_t>(
          rng_.uniform_int(0, static_cast<int>(target_pool_.size()) - 1))];
      out.push_back(std::move(bt));
    }
    return out;
  }

  std::string rng_state() const { return rng_.serialize(); }
  void set_rng_state(const std::string& s) { rng_.deserialize(s); }

 private:
  std::vector<size_t> source_pool_;
  std::vector<size_t> target_pool_;
  int source_bs_ = 8;
  Rng rng_{0};
};

// ---------------------------------------------------------------- corpus IO

// Directory layout: manifest.txt (key=value), images.bin (float64),
// labels.bin (uint8). Byte-exact round trip.
void save_corpus(const std::string& dir, const std::vector<Sample>& corpus,
                 const SynthParams& params, uint64_t seed);
std::vector<Sample> load_corpus(const std::string& dir);

}  // namespace cclseg
