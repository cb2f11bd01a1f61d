#pragma once

#include <string>
#include <vector>

#include "cclseg/contrastive.hpp"

// Memory profile of three contrastive-loss formulations on identical inputs:
// pixel-wise (every pixel an instance), block-wise (pixels contrast only
// inside fixed blocks), and centroid-based (and its multi-partition
// generalization). Peak bytes come from the tensor allocation tracker, not
// from formulas; the pairwise section covers the similarity-matrix work.

namespace cclseg {

struct BenchResult {
  std::string variant;  // pixelwise | block | centroid | mpccl
  Index h = 0, w = 0, k = 0, c = 0;
  int p_or_block = 0;  // partitions for centroid/mpccl, block edge for block
  long long peak_bytes = 0;
  long long pairwise_peak_bytes = 0;
  double wall_seconds = 0;
  double loss = 0;
  bool censored = false;  // ran out of memory budget, value absent
};

struct BenchSweep {
  std::vector<BenchResult> results;
  double pixelwise_pairwise_slope = 0;  // d log(pairwise bytes) / d log(H*W)
  double centroid_pairwise_slope = 0;
  std::string csv() const;
  std::string svg() const;  // log-log plot of the pairwise peaks
};

struct BenchInputs {
  Tensor<double> features;      // [1,C,H,W]
  Tensor<double> features_aug;  // [1,C,H,W]
  Tensor<double> soft;          // [1,K,H,W], per-pixel softmax
  CentroidSet<double> source;   // [K,C] reference centroids
};

BenchInputs make_bench_inputs(Index h, Index w, Index c, Index k, uint64_t seed);

BenchResult bench_pixelwise(const BenchInputs& in, double tau,
                            long long byte_budget = 2LL << 30);
BenchResult bench_block(const BenchInputs& in, double tau, int block_edge);
BenchResult bench_centroid(const BenchInputs& in, double tau);
BenchResult bench_mpccl(const BenchInputs& in, double tau, int partitions,
                        uint64_t seed);

BenchSweep run_sweep(const std::vector<Index>& sizes, Index channels,
                     Index classes, int partitions, double tau, uint64_t seed);

}  // namespace cclseg
