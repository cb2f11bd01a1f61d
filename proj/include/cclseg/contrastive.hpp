#pragma once

#include <vector>

#include "cclseg/centroids.hpp"

// Centroid-level contrastive losses: the exp-cosine similarity kernel, the
// inter/intra-domain loss whose denominator holds only negative pairs (the
// value can go negative), the centroid norm regularizer, and the
// multi-partition composition.

namespace cclseg {

inline constexpr double kEpsNorm = 1e-8;

struct ContrastiveConfig {
  double tau = 0.1;  // temperature; no canonical value, NT-Xent practice
  double lambda_contrast = 1.0;
  double lambda_cnr = 0.5;
  int partitions = 1;
  bool include_positive_in_denominator = false;

  void validate() const {
    CCLSEG_REQUIRE(tau > 0.0, "ContrastiveConfig: tau must be > 0");
    CCLSEG_REQUIRE(partitions >= 1, "ContrastiveConfig: P >= 1");
    CCLSEG_REQUIRE(lambda_contrast >= 0.0 && lambda_cnr >= 0.0,
                   "ContrastiveConfig: weights must be >= 0");
  }
};

// h(u, v) = exp(cos(u, v) / tau). Symmetric, invariant to positive scaling.
template <class S>
S similarity(const Tensor<S>& u, const Tensor<S>& v, S tau) {
  CCLSEG_REQUIRE(u.numel() == v.numel(), "similarity: length mismatch");
  CCLSEG_REQUIRE(tau > S(0), "similarity: tau must be > 0");
  const S nu = std::sqrt(u.vec().square().sum());
  const S nv = std::sqrt(v.vec().square().sum());
  if (nu <= S(kEpsNorm) || nv <= S(kEpsNorm))
    throw std::runtime_error("similarity: degenerate centroid (near-zero norm)");
  const S cosine = (u.vec() * v.vec()).sum() / (nu * nv);
  return std::exp(cosine / tau);
}

// One side of a contrastive pair: differentiable centroid rows plus the
// per-class presence flags that gate them.
template <class S>
struct CentroidArg {
  Var<S> values;  // [K, C]
  std::vector<uint8_t> present;

  static CentroidArg from(const CentroidVars<S>& cv) {
    return CentroidArg{cv.values, cv.present};
  }
  static CentroidArg constant(Tape<S>& tape, const CentroidSet<S>& cs) {
    return CentroidArg{tape.constant(cs.values), cs.present};
  }
};

namespace detail {

template <class S>
Var<S> normalized_rows(Var<S> m) {
  Var<S> n = ad::rows_l2norm(m, S(kEpsNorm));
  return ad::rowwise_scale(m, ad::recip(n));
}

}  // namespace detail

// L(A, B) = -sum_k log[ h(A_k, B_k) / sum_{d in {A,B}} sum_{i != k} h(A_k, D_i) ]
// Anchors are the rows of A. Classes absent on either side are skipped in the
// outer sum; classes absent in a given domain are skipped in that domain's
// negative pool. With fewer than two jointly present classes there are no
// usable pairs and the loss contributes zero.
template <class S>
Var<S> contrastive_loss(Tape<S>& tape, const CentroidArg<S>& anchors,
                        const CentroidArg<S>& others,
                        const ContrastiveConfig& cfg, bool quiet = false) {
  cfg.validate();
  const Index k = anchors.values.val().size(0);
  CCLSEG_REQUIRE(others.values.val().size(0) == k &&
                     others.values.val().size(1) == anchors.values.val().size(1),
                 "contrastive_loss: centroid sets disagree on K or C");
  CCLSEG_REQUIRE(static_cast<Index>(anchors.present.size()) == k &&
                     static_cast<Index>(others.present.size()) == k,
                 "contrastive_loss: presence flags missing");

  int jointly = 0;
  for (Index i = 0; i < k; ++i)
    if (anchors.present[static_cast<size_t>(i)] && others.present[static_cast<size_t>(i)])
      ++jointly;
  if (jointly < 2) {
    if (!quiet)
      warn("contrastive_loss: fewer than 2 jointly present classes, no negatives exist; contributing 0");
    return tape.scalar(S(0));
  }

  Var<S> an = detail::normalized_rows(anchors.values);
  Var<S> bn = detail::normalized_rows(others.values);
  const S inv_tau = S(1) / S(cfg.tau);
  Var<S> haa = ad::exp_v(ad::mul_scalar(ad::matmul(an, ad::transpose2d(an)), inv_tau));
  Var<S> hab = ad::exp_v(ad::mul_scalar(ad::matmul(an, ad::transpose2d(bn)), inv_tau));

  Tensor<S> mask_aa({k, k}), mask_ab({k, k}), valid({k}), pad({k});
  for (Index a = 0; a < k; ++a) {
    const bool va = anchors.present[static_cast<size_t>(a)] &&
                    others.present[static_cast<size_t>(a)];
    valid[a] = va ? S(1) : S(0);
    pad[a] = va ? S(0) : S(1);  // keeps log(denom) finite for masked anchors
    if (!va) continue;
    for (Index i = 0; i < k; ++i) {
      if (i != a && anchors.present[static_cast<size_t>(i)]) mask_aa.at2(a, i) = S(1);
      if (i != a && others.present[static_cast<size_t>(i)]) mask_ab.at2(a, i) = S(1);
    }
    if (cfg.include_positive_in_denominator) mask_ab.at2(a, a) = S(1);
  }

  Var<S> denom = ad::row_sums(ad::add(ad::mul(haa, tape.constant(mask_aa)),
                                      ad::mul(hab, tape.constant(mask_ab))));
  denom = ad::add(denom, tape.constant(pad));
  Var<S> pos = ad::diag2d(hab);
  Var<S> vmask = tape.constant(valid);
  Var<S> per_class =
      ad::mul(ad::sub(ad::log_v(denom), ad::log_v(pos)), vmask);
  return ad::sum_all(per_class);
}

// Inter-domain loss, Eq. anchored at target centroids against the (constant)
// source bank centroids.
template <class S>
Var<S> inter_domain_loss(Tape<S>& tape, const CentroidArg<S>& target,
                         const CentroidArg<S>& source,
                         const ContrastiveConfig& cfg, bool quiet = false) {
  return contrastive_loss(tape, target, source, cfg, quiet);
}

// Intra-domain loss between target centroids and their heavy-augmentation
// counterparts; same functional form.
template <class S>
Var<S> intra_domain_loss(Tape<S>& tape, const CentroidArg<S>& target,
                         const CentroidArg<S>& target_aug,
                         const ContrastiveConfig& cfg, bool quiet = false) {
  return contrastive_loss(tape, target, target_aug, cfg, quiet);
}

// R(C^t) = (1/K) sum_k (||C_k^t|| - ||C_k^s||)^2 over jointly present
// classes; the source side is a label, no gradient flows into it.
template <class S>
Var<S> cnr(Tape<S>& tape, const CentroidArg<S>& target,
           const CentroidSet<S>& source_labels) {
  const Index k = target.values.val().size(0);
  CCLSEG_REQUIRE(source_labels.values.size(0) == k,
                 "cnr: centroid sets disagree on K");
  Tensor<S> src_norms({k}), valid({k});
  int count = 0;
  for (Index i = 0; i < k; ++i) {
    const bool v = target.present[static_cast<size_t>(i)] &&
                   source_labels.present[static_cast<size_t>(i)];
    valid[i] = v ? S(1) : S(0);
    if (v) {
      src_norms[i] = std::sqrt(source_labels.values.mat2().row(i).squaredNorm());
      ++count;
    }
  }
  if (count == 0) return tape.scalar(S(0));
  Var<S> norms_t = ad::rows_l2norm(target.values, S(kEpsNorm));
  Var<S> diff = ad::sub(norms_t, tape.constant(src_norms));
  Var<S> sq = ad::mul(ad::square(diff), tape.constant(valid));
  return ad::mul_scalar(ad::sum_all(sq), S(1) / static_cast<S>(count));
}

// Eq.-style multi-partition composition:
//   (1/P) * sum_p [ L(C_p^t, C^s) + L(C~^t, C_p^t) ]
// Anchor is the first argument of each term.
template <class S>
Var<S> mpccl(Tape<S>& tape, const CentroidArg<S>& source,
             const std::vector<CentroidArg<S>>& target_partitions,
             const CentroidArg<S>& target_aug, const ContrastiveConfig& cfg,
             bool quiet = false) {
  CCLSEG_REQUIRE(!target_partitions.empty(), "mpccl: no partitions");
  Var<S> acc = tape.scalar(S(0));
  for (const auto& part : target_partitions) {
    acc = ad::add(acc, contrastive_loss(tape, part, source, cfg, quiet));
    acc = ad::add(acc, contrastive_loss(tape, target_aug, part, cfg, quiet));
  }
  return ad::mul_scalar(acc, S(1) / static_cast<S>(target_partitions.size()));
}

// sum_p R(C_p^t): summed, not averaged, over partitions.
template <class S>
Var<S> cnr_over_partitions(Tape<S>& tape,
                           const std::vector<CentroidArg<S>>& target_partitions,
                           const CentroidSet<S>& source_labels) {
  Var<S> acc = tape.scalar(S(0));
  for (const auto& part : target_partitions)
    acc = ad::add(acc, cnr(tape, part, source_labels));
  return acc;
}

}  // namespace cclseg
