#pragma once

#include <memory>
#include <vector>

#include "cclseg/autodiff.hpp"

// Class-wise feature centroids: mask-weighted spatial means of decoder
// features, the EMA memory bank for source centroids, soft pseudo-label
// masks, and random equal partitions of a soft prediction.

namespace cclseg {

// Classes whose accumulated mask weight falls at or below this are treated
// as absent: they carry no centroid and are skipped by every loss.
inline constexpr double kEpsMass = 1e-6;

template <class S>
struct CentroidSet {
  Tensor<S> values;             // [K, C]
  Tensor<S> per_class_mass;     // [K]
  std::vector<uint8_t> present; // per class

  Index num_classes() const { return values.size(0); }
  Index channels() const { return values.size(1); }
};

// Tape-side centroids: same bookkeeping, differentiable values.
template <class S>
struct CentroidVars {
  Var<S> values;                // [K, C]
  Var<S> per_class_mass;        // [K]
  std::vector<uint8_t> present;

  Index num_classes() const { return values.val().size(0); }
  CentroidSet<S> snapshot() const {
    return CentroidSet<S>{values.val(), per_class_mass.val(), present};
  }
};

namespace detail {
template <class S>
inline void check_centroid_shapes(const std::vector<Index>& fs,
                                  const std::vector<Index>& ms) {
  CCLSEG_REQUIRE(fs.size() == 4 && ms.size() == 4,
                 "compute_centroids: rank-4 feature and mask expected");
  CCLSEG_REQUIRE(fs[0] == ms[0] && fs[2] == ms[2] && fs[3] == ms[3],
                 "compute_centroids: B/H/W mismatch");
}
}  // namespace detail

// features [B,C,H,W], mask [B,K,H,W] with entries in [0,1].
// values[k] = sum_{b,h,w} features[b,:,h,w] * mask[b,k,h,w] / mass[k].
template <class S>
CentroidSet<S> compute_centroids(const Tensor<S>& features,
                                 const Tensor<S>& mask) {
  detail::check_centroid_shapes<S>(features.shape(), mask.shape());
  const Index b = features.size(0), c = features.size(1),
              k = mask.size(1), hw = features.size(2) * features.size(3);
  CentroidSet<S> out;
  out.values = Tensor<S>({k, c});
  out.per_class_mass = Tensor<S>({k});
  for (Index bi = 0; bi < b; ++bi) {
    typename Tensor<S>::ConstMatMap m(mask.data() + bi * k * hw, k, hw);
    typename Tensor<S>::ConstMatMap f(features.data() + bi * c * hw, c, hw);
    out.values.mat2().noalias() += m * f.transpose();
    out.per_class_mass.vec() += m.rowwise().sum().array();
  }
  out.present.resize(static_cast<size_t>(k));
  for (Index ki = 0; ki < k; ++ki) {
    const bool p = out.per_class_mass[ki] > S(kEpsMass);
    out.present[static_cast<size_t>(ki)] = p ? 1 : 0;
    const S denom = std::max(out.per_class_mass[ki], S(kEpsMass));
    out.values.mat2().row(ki) /= denom;
  }
  return out;
}

// Differentiable version; gradients flow into features and (for soft masks)
// into the mask unless the caller detaches it.
template <class S>
CentroidVars<S> compute_centroids(Tape<S>&, Var<S> features, Var<S> mask) {
  detail::check_centroid_shapes<S>(features.val().shape(), mask.val().shape());
  CentroidVars<S> out;
  Var<S> raw = ad::centroid_weighted_sum(features, mask);
  out.per_class_mass = ad::sum_bhw_per_class(mask);
  Var<S> inv = ad::recip(ad::clamp_min(out.per_class_mass, S(kEpsMass)));
  out.values = ad::rowwise_scale(raw, inv);
  const Index k = out.per_class_mass.val().numel();
  out.present.resize(static_cast<size_t>(k));
  for (Index ki = 0; ki < k; ++ki)
    out.present[static_cast<size_t>(ki)] =
        out.per_class_mass.val()[ki] > S(kEpsMass) ? 1 : 0;
  return out;
}

// Per-pixel softmax of logits [B,K,H,W]; the pseudo label.
template <class S>
Var<S> target_soft_mask(Tape<S>&, Var<S> logits) {
  return ad::softmax_channels(logits);
}

template <class S>
Tensor<S> target_soft_mask(const Tensor<S>& logits) {
  Tape<S> t;
  return ad::softmax_channels(t.constant(logits)).val();
}

// EMA memory bank over source centroids. The blend weights the FRESH
// observation by rho (rho_weights_fresh=true); the flag flips to the
// common convention where rho weighs the stored value.
template <class S>
struct MemoryBank {
  Tensor<S> centroids;               // [K, C]
  std::vector<uint8_t> initialized;  // per class
  S rho = S(0.9);
  bool rho_weights_fresh = true;

  MemoryBank() = default;
  MemoryBank(Index k, Index c, S rho_ = S(0.9), bool fresh_conv = true)
      : centroids({k, c}),
        initialized(static_cast<size_t>(k), 0),
        rho(rho_),
        rho_weights_fresh(fresh_conv) {
    CCLSEG_REQUIRE(rho_ > S(0) && rho_ < S(1), "MemoryBank: rho in (0,1)");
  }

  Index num_classes() const { return centroids.size(0); }
  Index channels() const { return centroids.size(1); }
  bool has(Index k) const { return initialized[static_cast<size_t>(k)] != 0; }

  void update(const CentroidSet<S>& fresh) {
    CCLSEG_REQUIRE(fresh.values.same_shape(centroids),
                   "MemoryBank::update: dimension mismatch");
    const S w_new = rho_weights_fresh ? rho : S(1) - rho;
    for (Index k = 0; k < num_classes(); ++k) {
      if (!fresh.present[static_cast<size_t>(k)]) continue;  // keep old value
      if (!has(k)) {
        centroids.mat2().row(k) = fresh.values.mat2().row(k);
        initialized[static_cast<size_t>(k)] = 1;
      } else {
        centroids.mat2().row(k) = w_new * fresh.values.mat2().row(k) +
                                  (S(1) - w_new) * centroids.mat2().row(k);
      }
    }
  }

  // Copy-on-read snapshot for loss computation.
  CentroidSet<S> snapshot() const {
    return CentroidSet<S>{centroids, Tensor<S>({num_classes()}), initialized};
  }
};

struct PartitionAssignment {
  std::vector<int> pixel_to_partition;  // [H*W]
  int partitions = 1;
};

// Uniform random permutation chunked into P nearly equal groups
// (sizes differ by at most one; the first n%P groups take the extra pixel).
inline PartitionAssignment make_partition_assignment(Index hw, int P, Rng& rng) {
  CCLSEG_REQUIRE(P >= 1 && static_cast<Index>(P) <= hw,
                 "partition: P out of range [1, H*W]");
  std::vector<int> perm(static_cast<size_t>(hw));
  for (Index i = 0; i < hw; ++i) perm[static_cast<size_t>(i)] = static_cast<int>(i);
  rng.shuffle(perm);
  PartitionAssignment pa;
  pa.partitions = P;
  pa.pixel_to_partition.assign(static_cast<size_t>(hw), 0);
  const Index base = hw / P, extra = hw % P;
  Index pos = 0;
  for (int p = 0; p < P; ++p) {
    const Index sz = base + (p < extra ? 1 : 0);
    for (Index i = 0; i < sz; ++i)
      pa.pixel_to_partition[static_cast<size_t>(perm[static_cast<size_t>(pos++)])] = p;
  }
  return pa;
}

// Splits a soft prediction [B,K,H,W] into P copies, each zeroed outside its
// partition. Summing the outputs reconstructs the input bitwise.
template <class S>
std::vector<Tensor<S>> partition_prediction(const Tensor<S>& soft,
                                            const PartitionAssignment& pa) {
  CCLSEG_REQUIRE(soft.rank() == 4, "partition_prediction: rank-4 expected");
  const Index b = soft.size(0), k = soft.size(1), hw = soft.size(2) * soft.size(3);
  CCLSEG_REQUIRE(static_cast<Index>(pa.pixel_to_partition.size()) == hw,
                 "partition_prediction: assignment size mismatch");
  std::vector<Tensor<S>> out;
  out.reserve(static_cast<size_t>(pa.partitions));
  for (int p = 0; p < pa.partitions; ++p) {
    Tensor<S> t(soft.shape());
    for (Index bi = 0; bi < b; ++bi)
      for (Index ki = 0; ki < k; ++ki) {
        const S* src = soft.data() + (bi * k + ki) * hw;
        S* dst = t.data() + (bi * k + ki) * hw;
        for (Index px = 0; px < hw; ++px)
          if (pa.pixel_to_partition[static_cast<size_t>(px)] == p)
            dst[px] = src[px];
      }
    out.push_back(std::move(t));
  }
  return out;
}

// Tape-side: zero the soft prediction outside each partition in one fused op
// per partition, preserving gradients into the soft prediction.
template <class S>
std::vector<Var<S>> partition_prediction(Tape<S>& tape, Var<S> soft,
                                         const PartitionAssignment& pa) {
  const auto& sh = soft.val().shape();
  CCLSEG_REQUIRE(sh.size() == 4, "partition_prediction: rank-4 expected");
  const Index b = sh[0], k = sh[1], hw = sh[2] * sh[3];
  CCLSEG_REQUIRE(static_cast<Index>(pa.pixel_to_partition.size()) == hw,
                 "partition_prediction: assignment size mismatch");
  // shared by all partition closures; the assignment outlives the tape walk
  auto assign = std::make_shared<std::vector<int>>(pa.pixel_to_partition);
  std::vector<Var<S>> out;
  out.reserve(static_cast<size_t>(pa.partitions));
  for (int p = 0; p < pa.partitions; ++p) {
    Tensor<S> masked(soft.val().shape());
    for (Index bi = 0; bi < b; ++bi)
      for (Index ki = 0; ki < k; ++ki) {
        const S* src = soft.val().data() + (bi * k + ki) * hw;
        S* dst = masked.data() + (bi * k + ki) * hw;
        for (Index px = 0; px < hw; ++px)
          if ((*assign)[static_cast<size_t>(px)] == p) dst[px] = src[px];
      }
    const int si = soft.idx;
    out.push_back(tape.make(std::move(masked), {soft},
                            [si, assign, p, b, k, hw](Tape<S>& t, int self) {
      if (!t.needs_grad(si)) return;
      const auto& g = t.grad_buf(self);
      auto& gs = t.grad_buf(si);
      for (Index bi = 0; bi < b; ++bi)
        for (Index ki = 0; ki < k; ++ki) {
          const S* gp = g.data() + (bi * k + ki) * hw;
          S* dst = gs.data() + (bi * k + ki) * hw;
          for (Index px = 0; px < hw; ++px)
            if ((*assign)[static_cast<size_t>(px)] == p) dst[px] += gp[px];
        }
    }));
  }
  return out;
}

}  // namespace cclseg
