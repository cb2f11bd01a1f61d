#include "cclseg/synth.hpp"

#include <array>
#include <cstring>

#include "cclseg/io.hpp"

namespace cclseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct SubjectGeom {
  double cx, cy;
  double r_lv;
  double myo_th;
  double rv_angle;
  double rv_ratio;
  double rv_ecc;
  double drift;
  int n_slices;
  std::array<double, 4> jitter;
};

SubjectGeom draw_geometry(const SynthParams& p, Rng& rng) {
  SubjectGeom g;
  const double s = static_cast<double>(p.image_size);
  g.cx = s / 2 + rng.uniform(-2.5, 2.5);
  g.cy = s / 2 + rng.uniform(-2.5, 2.5);
  g.r_lv = rng.uniform(p.lv_radius_min, p.lv_radius_max) * s / 64.0;
  g.myo_th = rng.uniform(p.myo_thickness_min, p.myo_thickness_max) * s / 64.0;
  g.rv_angle = rng.uniform(0, 2 * kPi);
  g.rv_ratio = rng.uniform(0.60, 0.80);
  g.rv_ecc = rng.uniform(1.15, 1.45);
  g.drift = rng.uniform(-0.25, 0.25);
  g.n_slices = rng.uniform_int(p.min_slices, p.max_slices);
  for (auto& j : g.jitter) j = rng.uniform(-0.04, 0.04);
  return g;
}

Tensor<uint8_t> render_label(const SynthParams& p, const SubjectGeom& g, int slice) {
  const Index S = p.image_size;
  Tensor<uint8_t> lbl({S, S});
  // apex-to-base profile: structures grow smoothly with the slice index
  const double scale =
      0.55 + 0.45 * (static_cast<double>(slice) + 0.5) / g.n_slices;
  const double cx = g.cx + g.drift * slice, cy = g.cy + g.drift * slice * 0.5;
  const double r_lv = g.r_lv * scale;
  const double th = g.myo_th * std::max(scale, 0.7);
  const double rv_r = g.rv_ratio * r_lv;
  const double rv_cx = cx + (r_lv + th + 0.7 * rv_r) * std::cos(g.rv_angle);
  const double rv_cy = cy + (r_lv + th + 0.7 * rv_r) * std::sin(g.rv_angle);
  const double ca = std::cos(g.rv_angle), sa = std::sin(g.rv_angle);
  for (Index y = 0; y < S; ++y)
    for (Index x = 0; x < S; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double d = std::sqrt(dx * dx + dy * dy);
      uint8_t c = 0;
      if (d <= r_lv) {
        c = 2;  // inner disk (LV analogue)
      } else if (d <= r_lv + th) {
        c = 1;  // ring (MYO analogue)
      } else {
        const double ex = static_cast<double>(x) - rv_cx;
        const double ey = static_cast<double>(y) - rv_cy;
        const double u = (ex * ca + ey * sa) / (g.rv_ecc * rv_r);
        const double v = (-ex * sa + ey * ca) / rv_r;
        if (u * u + v * v <= 1.0) c = 3;  // adjacent blob (RV analogue)
      }
      lbl[y * S + x] = c;
    }
  return lbl;
}

Tensor<double> render_image(const SynthParams& p, const SubjectGeom& g,
                            const Tensor<uint8_t>& lbl, Domain dom, Rng& rng) {
  const Index S = p.image_size;
  Tensor<double> img({1, S, S});

  // class base intensities per domain; the target flips the ring/disk
  // ordering relative to the source (the domain shift)
  static constexpr std::array<double, 4> kSource{0.15, 0.35, 0.85, 0.75};
  static constexpr std::array<double, 4> kTarget{0.42, 0.85, 0.62, 0.30};
  static constexpr std::array<double, 4> kAux{0.10, 0.55, 0.70, 0.60};
  const std::array<double, 4>& base = dom == Domain::source ? kSource
                                      : dom == Domain::target ? kTarget
                                                              : kAux;
  for (Index i = 0; i < S * S; ++i)
    img[i] = base[lbl[i]] + g.jitter[lbl[i]];

  if (dom == Domain::source) {
    const double c1 = rng.uniform(0.5, 1.5), c2 = rng.uniform(0.5, 1.5);
    const double phi = rng.uniform(0, 2 * kPi);
    for (Index y = 0; y < S; ++y)
      for (Index x = 0; x < S; ++x)
        img[y * S + x] +=
            0.05 * std::sin(2 * kPi * (c1 * x + c2 * y) / static_cast<double>(S) + phi);
    for (Index i = 0; i < S * S; ++i) img[i] += 0.02 * rng.normal();
    detail::separable_blur(img, S, S, detail::gauss_kernel(0.6, 1));
  } else if (dom == Domain::target) {
    const double bx = rng.uniform(0.2, 0.8) * S, by = rng.uniform(0.2, 0.8) * S;
    const double bs = rng.uniform(0.3, 0.5) * S;
    const double amp = rng.uniform(0.15, 0.3);
    for (Index y = 0; y < S; ++y)
      for (Index x = 0; x < S; ++x) {
        const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        img[y * S + x] *= 1.0 + amp * std::exp(-0.5 * d2 / (bs * bs));
      }
    for (Index i = 0; i < S * S; ++i) img[i] *= 1.0 + 0.10 * rng.normal();  // speckle
    detail::separable_blur(img, S, S, detail::gauss_kernel(0.5, 1));
  } else {
    for (Index i = 0; i < S * S; ++i) img[i] += 0.03 * rng.normal();
    const double gamma = rng.uniform(0.75, 1.3);
    for (Index i = 0; i < S * S; ++i)
      img[i] = std::pow(std::clamp(img[i], 0.0, 1.0), gamma);
    detail::separable_blur(img, S, S, detail::gauss_kernel(0.8, 2));
  }

  detail::minmax_normalize(img);
  return img;
}

int subject_base_id(Domain d) {
  switch (d) {
    case Domain::source: return 0;
    case Domain::target: return 1000;
    default: return 2000;
  }
}

}  // namespace

std::vector<Sample> generate_corpus(const SynthParams& params, uint64_t seed) {
  params.validate();
  std::vector<Sample> corpus;
  const std::array<std::pair<Domain, int>, 3> plan{
      std::pair{Domain::source, params.source_subjects},
      std::pair{Domain::target, params.target_subjects},
      std::pair{Domain::aux, params.aux_subjects}};
  for (const auto& [dom, count] : plan) {
    for (int subj = 0; subj < count; ++subj) {
      Rng rng(detail::mix_seed(seed, detail::mix_seed(
                                         static_cast<uint64_t>(dom) + 11,
                                         static_cast<uint64_t>(subj) + 101)));
      const SubjectGeom geom = draw_geometry(params, rng);
      for (int sl = 0; sl < geom.n_slices; ++sl) {
        Sample s;
        s.label = render_label(params, geom, sl);
        s.image = render_image(params, geom, s.label, dom, rng);
        s.domain = dom;
        s.subject_id = subject_base_id(dom) + subj;
        s.slice_id = sl;
        s.fold = subj % params.folds;
        corpus.push_back(std::move(s));
      }
    }
  }
  return corpus;
}

// ------------------------------------------------------------- augmentation

namespace {

void warp_affine(Sample& s, Rng& rng) {
  const Index H = s.image.size(1), W = s.image.size(2);
  const double ang = rng.uniform(-15.0, 15.0) * kPi / 180.0;
  const double tx = rng.uniform(-0.1, 0.1) * static_cast<double>(W);
  const double ty = rng.uniform(-0.1, 0.1) * static_cast<double>(H);
  const double sc = rng.uniform(0.9, 1.1);
  const double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
  const double ca = std::cos(ang), sa = std::sin(ang);
  Tensor<double> img({1, H, W});
  Tensor<uint8_t> lbl({H, W});
  Tensor<double> flat = s.image.reshaped({H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      // inverse map of rotate+scale about center then translate
      const double px = static_cast<double>(x) - cx - tx;
      const double py = static_cast<double>(y) - cy - ty;
      const double sx = (ca * px + sa * py) / sc + cx;
      const double sy = (-sa * px + ca * py) / sc + cy;
      img[y * W + x] = detail::bilinear_at(flat, H, W, sy, sx);
      lbl[y * W + x] = detail::nearest_label_at(s.label, H, W, sy, sx);
    }
  s.image = img;
  s.label = lbl;
}

void warp_elastic(Sample& s, Rng& rng) {
  const Index H = s.image.size(1), W = s.image.size(2);
  constexpr int G = 4;
  std::array<double, G * G> dx{}, dy{};
  for (auto& v : dx) v = rng.normal() * 2.5;
  for (auto& v : dy) v = rng.normal() * 2.5;
  auto grid_at = [&](const std::array<double, G * G>& g, double y, double x) {
    const double gy = y / static_cast<double>(H - 1) * (G - 1);
    const double gx = x / static_cast<double>(W - 1) * (G - 1);
    const int y0 = std::min(G - 2, static_cast<int>(gy));
    const int x0 = std::min(G - 2, static_cast<int>(gx));
    const double fy = gy - y0, fx = gx - x0;
    return (1 - fy) * ((1 - fx) * g[static_cast<size_t>(y0 * G + x0)] +
                       fx * g[static_cast<size_t>(y0 * G + x0 + 1)]) +
           fy * ((1 - fx) * g[static_cast<size_t>((y0 + 1) * G + x0)] +
                 fx * g[static_cast<size_t>((y0 + 1) * G + x0 + 1)]);
  };
  Tensor<double> img({1, H, W});
  Tensor<uint8_t> lbl({H, W});
  Tensor<double> flat = s.image.reshaped({H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const double sy = static_cast<double>(y) + grid_at(dy, y, x);
      const double sx = static_cast<double>(x) + grid_at(dx, y, x);
      img[y * W + x] = detail::bilinear_at(flat, H, W, sy, sx);
      lbl[y * W + x] = detail::nearest_label_at(s.label, H, W, sy, sx);
    }
  s.image = img;
  s.label = lbl;
}

void add_gaussian_noise(Sample& s, Rng& rng) {
  const double sigma = rng.uniform(0.01, 0.08);
  for (Index i = 0; i < s.image.numel(); ++i) s.image[i] += sigma * rng.normal();
}

void random_dropout(Sample& s, Rng& rng) {
  const Index H = s.image.size(1), W = s.image.size(2);
  const int n = rng.uniform_int(1, 3);
  for (int r = 0; r < n; ++r) {
    const int rw = rng.uniform_int(3, 10), rh = rng.uniform_int(3, 10);
    const int x0 = rng.uniform_int(0, static_cast<int>(W) - rw);
    const int y0 = rng.uniform_int(0, static_cast<int>(H) - rh);
    for (int y = y0; y < y0 + rh; ++y)
      for (int x = x0; x < x0 + rw; ++x) s.image[y * W + x] = 0.0;
  }
}

void gaussian_blur(Sample& s, Rng& rng) {
  const double sigma = rng.uniform(0.5, 1.2);
  const Index H = s.image.size(1), W = s.image.size(2);
  detail::separable_blur(s.image, H, W, detail::gauss_kernel(sigma, 2));
}

void clamp01(Sample& s) {
  for (Index i = 0; i < s.image.numel(); ++i)
    s.image[i] = std::clamp(s.image[i], 0.0, 1.0);
}

}  // namespace

Sample augment_source(const Sample& s, uint64_t seed) {
  Sample out = s;
  Rng rng(seed);
  if (rng.uniform() < 0.5) warp_affine(out, rng);
  clamp01(out);
  return out;
}

Sample augment_target_heavy(const Sample& s, uint64_t seed) {
  Sample out = s;
  Rng rng(seed);
  if (rng.uniform() < 0.5) warp_affine(out, rng);
  if (rng.uniform() < 0.5) warp_elastic(out, rng);
  if (rng.uniform() < 0.5) add_gaussian_noise(out, rng);
  if (rng.uniform() < 0.5) random_dropout(out, rng);
  if (rng.uniform() < 0.5) gaussian_blur(out, rng);
  clamp01(out);
  return out;
}

// ------------------------------------------------------------------ batches

CorpusSplit split_corpus(const std::vector<Sample>& corpus, int fold,
                         ExperimentMode mode) {
  CorpusSplit sp;
  for (size_t i = 0; i < corpus.size(); ++i) {
    const Sample& s = corpus[i];
    const bool test = s.fold == fold;
    if (s.domain == Domain::source) {
      (test ? sp.source_test : sp.source_train).push_back(i);
      if (!test) sp.style_pool.push_back(i);
    } else if (s.domain == Domain::target) {
      (test ? sp.target_test : sp.target_train).push_back(i);
    } else {
      sp.style_pool.push_back(i);
    }
  }
  CCLSEG_REQUIRE(!sp.source_train.empty(), "split_corpus: empty source train pool");
  CCLSEG_REQUIRE(!sp.target_train.empty(), "split_corpus: empty target train pool");
  CCLSEG_REQUIRE(!sp.target_test.empty(), "split_corpus: empty target test pool");

  if (mode != ExperimentMode::full) {
    // fewshot: one subject's slice sequence; oneshot: its middle slice only
    int subject = corpus[sp.target_train[0]].subject_id;
    for (size_t i : sp.target_train)
      subject = std::min(subject, corpus[i].subject_id);
    std::vector<size_t> subj_slices;
    for (size_t i : sp.target_train)
      if (corpus[i].subject_id == subject) subj_slices.push_back(i);
    std::sort(subj_slices.begin(), subj_slices.end(), [&](size_t a, size_t b) {
      return corpus[a].slice_id < corpus[b].slice_id;
    });
    if (mode == ExperimentMode::fewshot) {
      sp.target_train = subj_slices;
    } else {
      sp.target_train = {subj_slices[subj_slices.size() / 2]};
    }
  }
  return sp;
}

// ---------------------------------------------------------------- corpus IO

void save_corpus(const std::string& dir, const std::vector<Sample>& corpus,
                 const SynthParams& params, uint64_t seed) {
  CCLSEG_REQUIRE(!corpus.empty(), "save_corpus: empty corpus");
  io::make_dirs(dir);
  const Index S = params.image_size;
  io::Manifest m;
  m.set("format", "cclseg-corpus-v1");
  m.set_int("image_size", S);
  m.set_int("num_classes", params.num_classes);
  m.set_int("count", static_cast<long long>(corpus.size()));
  m.set_u64("seed", seed);
  m.set_u64("params_hash", params.content_hash());
  std::vector<double> images;
  std::vector<uint8_t> labels;
  images.reserve(corpus.size() * static_cast<size_t>(S * S));
  labels.reserve(corpus.size() * static_cast<size_t>(S * S));
  for (size_t i = 0; i < corpus.size(); ++i) {
    const Sample& s = corpus[i];
    CCLSEG_REQUIRE(s.image.numel() == S * S && s.label.numel() == S * S,
                   "save_corpus: sample size mismatch");
    const std::string p = "sample." + std::to_string(i) + ".";
    m.set(p + "domain", domain_name(s.domain));
    m.set_int(p + "subject", s.subject_id);
    m.set_int(p + "slice", s.slice_id);
    m.set_int(p + "fold", s.fold);
    images.insert(images.end(), s.image.data(), s.image.data() + S * S);
    labels.insert(labels.end(), s.label.data(), s.label.data() + S * S);
  }
  m.save(dir + "/manifest.txt");
  io::write_file_bytes(dir + "/images.bin", images.data(), images.size() * sizeof(double));
  io::write_file_bytes(dir + "/labels.bin", labels.data(), labels.size());
}

std::vector<Sample> load_corpus(const std::string& dir) {
  io::Manifest m = io::Manifest::load(dir + "/manifest.txt");
  CCLSEG_REQUIRE(m.get("format") == "cclseg-corpus-v1",
                 "load_corpus: unknown corpus format");
  const Index S = m.get_int("image_size");
  const auto count = static_cast<size_t>(m.get_int("count"));
  const auto img_bytes = io::read_file_bytes(dir + "/images.bin");
  const auto lbl_bytes = io::read_file_bytes(dir + "/labels.bin");
  CCLSEG_REQUIRE(img_bytes.size() == count * static_cast<size_t>(S * S) * sizeof(double),
                 "load_corpus: images.bin size mismatch");
  CCLSEG_REQUIRE(lbl_bytes.size() == count * static_cast<size_t>(S * S),
                 "load_corpus: labels.bin size mismatch");
  std::vector<Sample> corpus(count);
  for (size_t i = 0; i < count; ++i) {
    Sample& s = corpus[i];
    const std::string p = "sample." + std::to_string(i) + ".";
    s.domain = domain_from_name(m.get(p + "domain"));
    s.subject_id = static_cast<int>(m.get_int(p + "subject"));
    s.slice_id = static_cast<int>(m.get_int(p + "slice"));
    s.fold = static_cast<int>(m.get_int(p + "fold"));
    s.image = Tensor<double>({1, S, S});
    std::memcpy(s.image.data(), img_bytes.data() + i * static_cast<size_t>(S * S) * sizeof(double),
                static_cast<size_t>(S * S) * sizeof(double));
    s.label = Tensor<uint8_t>({S, S});
    std::memcpy(s.label.data(), lbl_bytes.data() + i * static_cast<size_t>(S * S),
                static_cast<size_t>(S * S));
  }
  return corpus;
}

}  // namespace cclseg
