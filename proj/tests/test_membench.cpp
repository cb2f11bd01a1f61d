#include <doctest.h>

#include "cclseg/membench.hpp"
#include "test_helpers.hpp"

using namespace cclseg;

TEST_CASE("bench variants agree where they must") {
  BenchInputs in = make_bench_inputs(12, 12, 8, 4, 99);
  const double tau = 0.1;

  BenchResult px = bench_pixelwise(in, tau);
  BenchResult bl = bench_block(in, tau, 8);
  BenchResult ct = bench_centroid(in, tau);
  BenchResult mp = bench_mpccl(in, tau, 4, 5);
  for (const auto& r : {px, bl, ct, mp}) {
    CHECK_FALSE(r.censored);
    CHECK(std::isfinite(r.loss));
    CHECK(r.peak_bytes > 0);
    CHECK(r.pairwise_peak_bytes > 0);
  }

  // centroid variant shares the production code path exactly
  Tape<double> tape;
  auto cset = compute_centroids(tape, tape.constant(in.features), tape.constant(in.soft));
  ContrastiveConfig cfg;
  cfg.tau = tau;
  const double direct =
      contrastive_loss(tape, CentroidArg<double>::from(cset),
                       CentroidArg<double>::constant(tape, in.source), cfg, true)
          .item();
  CHECK(ct.loss == direct);

  // mpccl with P=1 equals the centroid inter term plus the intra term; just
  // sanity-check it is finite and different from zero here
  CHECK(mp.loss != 0.0);
}

TEST_CASE("pairwise memory scales quadratically for pixels, constant for centroids") {
  BenchSweep sweep = run_sweep({8, 12, 16, 24, 32}, 16, 4, 4, 0.1, 7);
  CHECK(sweep.pixelwise_pairwise_slope >= 1.8);
  CHECK(sweep.pixelwise_pairwise_slope <= 2.2);
  CHECK(std::abs(sweep.centroid_pairwise_slope) <= 0.1);

  // budget-censored pixelwise points are recorded, not dropped
  BenchInputs big = make_bench_inputs(64, 64, 16, 4, 11);
  BenchResult censored = bench_pixelwise(big, 0.1, /*byte_budget=*/1 << 20);
  CHECK(censored.censored);

  // CSV has the expected header and the slope footer
  const std::string csv = sweep.csv();
  CHECK(csv.find("variant,h,w,k,c,p_or_block,peak_bytes,pairwise_peak_bytes") == 0);
  CHECK(csv.find("pixelwise_pairwise_slope") != std::string::npos);
  CHECK(sweep.svg().find("<svg") == 0);
}

TEST_CASE("partition interpolation approaches the pixelwise footprint") {
  const Index s = 24;
  BenchInputs in = make_bench_inputs(s, s, 16, 4, 13);
  BenchResult px = bench_pixelwise(in, 0.1);
  BenchResult mp_full = bench_mpccl(in, 0.1, static_cast<int>(s * s), 3);
  BenchResult mp_one = bench_mpccl(in, 0.1, 1, 3);
  // P = H*W matches the pixel-wise variant within 2x; P = 1 is far below
  const double ratio = static_cast<double>(mp_full.peak_bytes) /
                       static_cast<double>(px.peak_bytes);
  CHECK(ratio < 2.0);
  CHECK(ratio > 0.5);
  CHECK(mp_one.peak_bytes * 10 < mp_full.peak_bytes);
}
