#include "cclseg/membench.hpp"

#include <chrono>
#include <cmath>

namespace cclseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// pixel feature matrix [N, C] from [1,C,H,W]
Tensor<double> pixels_of(const Tensor<double>& f) {
  const Index c = f.size(1), hw = f.size(2) * f.size(3);
  Tensor<double> out({hw, c});
  for (Index ci = 0; ci < c; ++ci)
    for (Index p = 0; p < hw; ++p) out.at2(p, ci) = f[ci * hw + p];
  return out;
}

Var<double> normalized(Tape<double>& t, Var<double> m) {
  return ad::rowwise_scale(m, ad::recip(ad::rows_l2norm(m, kEpsNorm)));
}

// NT-Xent over rows: anchors A, positives at the same row of B, negatives
// all other rows of A and B
double ntxent_rows(Tape<double>& t, Var<double> a, Var<double> b, double tau,
                   long long* pairwise_peak) {
  Var<double> an = normalized(t, a), bn = normalized(t, b);
  MemScope pairwise;
  Var<double> h_tt = ad::exp_v(ad::mul_scalar(ad::matmul(an, ad::transpose2d(an)), 1.0 / tau));
  Var<double> h_ta = ad::exp_v(ad::mul_scalar(ad::matmul(an, ad::transpose2d(bn)), 1.0 / tau));
  Var<double> pos = ad::diag2d(h_ta);
  Var<double> denom = ad::sub(ad::add(ad::row_sums(h_tt), ad::row_sums(h_ta)),
                              ad::add(ad::diag2d(h_tt), pos));
  Var<double> loss = ad::mean_all(ad::sub(ad::log_v(denom), ad::log_v(pos)));
  *pairwise_peak = pairwise.peak_above_base();
  return loss.item();
}

double fit_slope(const std::vector<std::pair<double, double>>& xy) {
  const auto n = static_cast<double>(xy.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto [x, y] : xy) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  return denom == 0 ? 0.0 : (n * sxy - sx * sy) / denom;
}

}  // namespace

BenchInputs make_bench_inputs(Index h, Index w, Index c, Index k, uint64_t seed) {
  Rng rng(seed);
  BenchInputs in;
  in.features = Tensor<double>::randn({1, c, h, w}, rng);
  in.features_aug = Tensor<double>::randn({1, c, h, w}, rng);
  Tensor<double> logits = Tensor<double>::randn({1, k, h, w}, rng);
  in.soft = target_soft_mask(logits);
  in.source.values = Tensor<double>::randn({k, c}, rng);
  in.source.per_class_mass = Tensor<double>::full({k}, 1.0);
  in.source.present.assign(static_cast<size_t>(k), 1);
  return in;
}

BenchResult bench_pixelwise(const BenchInputs& in, double tau, long long byte_budget) {
  BenchResult r;
  r.variant = "pixelwise";
  r.h = in.features.size(2);
  r.w = in.features.size(3);
  r.c = in.features.size(1);
  r.k = in.soft.size(1);
  const Index n = r.h * r.w;
  // the retained similarity matrices dominate: ~6 N^2 doubles
  if (6.0 * static_cast<double>(n) * static_cast<double>(n) * 8.0 >
      static_cast<double>(byte_budget)) {
    r.censored = true;
    return r;
  }
  const auto t0 = Clock::now();
  MemScope whole;
  Tape<double> tape;
  Var<double> a = tape.constant(pixels_of(in.features));
  Var<double> b = tape.constant(pixels_of(in.features_aug));
  r.loss = ntxent_rows(tape, a, b, tau, &r.pairwise_peak_bytes);
  r.peak_bytes = whole.peak_above_base();
  r.wall_seconds = seconds_since(t0);
  return r;
}

BenchResult bench_block(const BenchInputs& in, double tau, int block_edge) {
  BenchResult r;
  r.variant = "block";
  r.h = in.features.size(2);
  r.w = in.features.size(3);
  r.c = in.features.size(1);
  r.k = in.soft.size(1);
  r.p_or_block = block_edge;
  const auto t0 = Clock::now();
  MemScope whole;
  Tensor<double> fa = pixels_of(in.features);
  Tensor<double> fb = pixels_of(in.features_aug);
  double loss_sum = 0;
  long count = 0;
  long long pairwise = 0;
  {
    MemScope pairwise_scope;
    for (Index by = 0; by < r.h; by += block_edge)
      for (Index bx = 0; bx < r.w; bx += block_edge) {
        const Index eh = std::min<Index>(block_edge, r.h - by);
        const Index ew = std::min<Index>(block_edge, r.w - bx);
        Tensor<double> ba({eh * ew, r.c}), bb({eh * ew, r.c});
        Index row = 0;
        for (Index y = by; y < by + eh; ++y)
          for (Index x = bx; x < bx + ew; ++x, ++row)
            for (Index c = 0; c < r.c; ++c) {
              ba.at2(row, c) = fa.at2(y * r.w + x, c);
              bb.at2(row, c) = fb.at2(y * r.w + x, c);
            }
        if (eh * ew < 2) continue;
        Tape<double> tape;
        long long ignore = 0;
        loss_sum += ntxent_rows(tape, tape.constant(ba), tape.constant(bb), tau, &ignore) *
                    static_cast<double>(eh * ew);
        count += eh * ew;
      }
    pairwise = pairwise_scope.peak_above_base();
  }
  r.pairwise_peak_bytes = pairwise;
  r.loss = loss_sum / static_cast<double>(count);
  r.peak_bytes = whole.peak_above_base();
  r.wall_seconds = seconds_since(t0);
  return r;
}

BenchResult bench_centroid(const BenchInputs& in, double tau) {
  BenchResult r;
  r.variant = "centroid";
  r.h = in.features.size(2);
  r.w = in.features.size(3);
  r.c = in.features.size(1);
  r.k = in.soft.size(1);
  r.p_or_block = 1;
  const auto t0 = Clock::now();
  MemScope whole;
  Tape<double> tape;
  auto ct = compute_centroids(tape, tape.constant(in.features), tape.constant(in.soft));
  ContrastiveConfig cfg;
  cfg.tau = tau;
  long long pairwise = 0;
  {
    MemScope scope;
    Var<double> loss = contrastive_loss(tape, CentroidArg<double>::from(ct),
                                        CentroidArg<double>::constant(tape, in.source),
                                        cfg, true);
    pairwise = scope.peak_above_base();
    r.loss = loss.item();
  }
  r.pairwise_peak_bytes = pairwise;
  r.peak_bytes = whole.peak_above_base();
  r.wall_seconds = seconds_since(t0);
  return r;
}

BenchResult bench_mpccl(const BenchInputs& in, double tau, int partitions,
                        uint64_t seed) {
  BenchResult r;
  r.variant = "mpccl";
  r.h = in.features.size(2);
  r.w = in.features.size(3);
  r.c = in.features.size(1);
  r.k = in.soft.size(1);
  r.p_or_block = partitions;
  Rng rng(seed);
  const auto t0 = Clock::now();
  MemScope whole;
  Tape<double> tape;
  Var<double> soft = tape.constant(in.soft);
  Var<double> feats = tape.constant(in.features);
  auto aug = compute_centroids(tape, tape.constant(in.features_aug), soft);
  PartitionAssignment pa = make_partition_assignment(r.h * r.w, partitions, rng);
  std::vector<Var<double>> parts = partition_prediction(tape, soft, pa);
  std::vector<CentroidArg<double>> args;
  for (auto& pm : parts)
    args.push_back(CentroidArg<double>::from(compute_centroids(tape, feats, pm)));
  ContrastiveConfig cfg;
  cfg.tau = tau;
  cfg.partitions = partitions;
  long long pairwise = 0;
  {
    MemScope scope;
    Var<double> loss = mpccl(tape, CentroidArg<double>::constant(tape, in.source), args,
                             CentroidArg<double>::from(aug), cfg, true);
    pairwise = scope.peak_above_base();
    r.loss = loss.item();
  }
  r.pairwise_peak_bytes = pairwise;
  r.peak_bytes = whole.peak_above_base();
  r.wall_seconds = seconds_since(t0);
  return r;
}

BenchSweep run_sweep(const std::vector<Index>& sizes, Index channels, Index classes,
                     int partitions, double tau, uint64_t seed) {
  BenchSweep sweep;
  std::vector<std::pair<double, double>> px_pts, ct_pts;
  for (Index s : sizes) {
    BenchInputs in = make_bench_inputs(s, s, channels, classes, seed + static_cast<uint64_t>(s));
    BenchResult px = bench_pixelwise(in, tau);
    BenchResult bl = bench_block(in, tau, 8);
    BenchResult ct = bench_centroid(in, tau);
    BenchResult mp = bench_mpccl(in, tau, partitions, seed);
    if (!px.censored)
      px_pts.emplace_back(std::log(static_cast<double>(s * s)),
                          std::log(static_cast<double>(px.pairwise_peak_bytes)));
    ct_pts.emplace_back(std::log(static_cast<double>(s * s)),
                        std::log(static_cast<double>(ct.pairwise_peak_bytes)));
    sweep.results.push_back(px);
    sweep.results.push_back(bl);
    sweep.results.push_back(ct);
    sweep.results.push_back(mp);
  }
  // partition interpolation on the largest size: centroid regime -> pixel regime
  const Index s = sizes.back();
  BenchInputs in = make_bench_inputs(s, s, channels, classes, seed + 777);
  for (Index p = 1; p < s * s; p *= 8)
    sweep.results.push_back(bench_mpccl(in, tau, static_cast<int>(p), seed));
  sweep.results.push_back(bench_mpccl(in, tau, static_cast<int>(s * s), seed));

  sweep.pixelwise_pairwise_slope = fit_slope(px_pts);
  sweep.centroid_pairwise_slope = fit_slope(ct_pts);
  return sweep;
}

std::string BenchSweep::csv() const {
  std::string s =
      "variant,h,w,k,c,p_or_block,peak_bytes,pairwise_peak_bytes,wall_seconds,loss,censored\n";
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%lld,%lld,%d,%lld,%lld,%.6f,%.9g,%d\n",
                  r.variant.c_str(), static_cast<long long>(r.h),
                  static_cast<long long>(r.w), static_cast<long long>(r.k),
                  static_cast<long long>(r.c), r.p_or_block, r.peak_bytes,
                  r.pairwise_peak_bytes, r.wall_seconds, r.loss, r.censored ? 1 : 0);
    s += buf;
  }
  char tail[160];
  std::snprintf(tail, sizeof(tail), "# pixelwise_pairwise_slope,%.4f\n# centroid_pairwise_slope,%.4f\n",
                pixelwise_pairwise_slope, centroid_pairwise_slope);
  s += tail;
  return s;
}

std::string BenchSweep::svg() const {
  // log-log scatter of pairwise peaks per variant
  const double W = 640, H = 480, M = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& r : results) {
    if (r.censored || r.pairwise_peak_bytes <= 0) continue;
    const double x = std::log10(static_cast<double>(r.h * r.w));
    const double y = std::log10(static_cast<double>(r.pairwise_peak_bytes));
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  auto sx = [&](double x) { return M + (x - xmin) / std::max(1e-9, xmax - xmin) * (W - 2 * M); };
  auto sy = [&](double y) { return H - M - (y - ymin) / std::max(1e-9, ymax - ymin) * (H - 2 * M); };
  std::string svg = "<svg xmlns='http://www.w3.org/2000/svg' width='640' height='480'>\n";
  svg += "<rect width='640' height='480' fill='white'/>\n";
  svg += "<text x='200' y='24' font-size='14'>pairwise-term peak bytes vs H*W (log-log)</text>\n";
  const char* colors[] = {"#c33", "#38c", "#3a3", "#a60"};
  const char* names[] = {"pixelwise", "block", "centroid", "mpccl"};
  for (int v = 0; v < 4; ++v) {
    std::string pts;
    for (const auto& r : results) {
      if (r.variant != names[v] || r.censored || r.pairwise_peak_bytes <= 0) continue;
      const double x = sx(std::log10(static_cast<double>(r.h * r.w)));
      const double y = sy(std::log10(static_cast<double>(r.pairwise_peak_bytes)));
      char buf[96];
      std::snprintf(buf, sizeof(buf), "<circle cx='%.1f' cy='%.1f' r='4' fill='%s'/>\n",
                    x, y, colors[v]);
      pts += buf;
    }
    svg += pts;
    char legend[160];
    std::snprintf(legend, sizeof(legend),
                  "<text x='530' y='%d' font-size='12' fill='%s'>%s</text>\n", 50 + 18 * v,
                  colors[v], names[v]);
    svg += legend;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace cclseg
