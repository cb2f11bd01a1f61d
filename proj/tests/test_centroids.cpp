#include <doctest.h>

#include "cclseg/centroids.hpp"
#include "test_helpers.hpp"

using namespace cclseg;
using namespace cclseg::testing;
namespace op = cclseg::ad;

namespace {

// Independent oracle: plain per-pixel loops, no shared code with the
// vectorized implementation.
CentroidSet<double> brute_force_centroids(const TensorD& feat, const TensorD& mask) {
  const Index B = feat.size(0), C = feat.size(1), H = feat.size(2), W = feat.size(3);
  const Index K = mask.size(1);
  CentroidSet<double> out;
  out.values = TensorD({K, C});
  out.per_class_mass = TensorD({K});
  out.present.assign(static_cast<size_t>(K), 0);
  for (Index k = 0; k < K; ++k) {
    double m = 0.0;
    std::vector<double> acc(static_cast<size_t>(C), 0.0);
    for (Index b = 0; b < B; ++b)
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          const double wgt = mask.at4(b, k, h, w);
          m += wgt;
          for (Index c = 0; c < C; ++c)
            acc[static_cast<size_t>(c)] += wgt * feat.at4(b, c, h, w);
        }
    out.per_class_mass[k] = m;
    if (m > kEpsMass) {
      out.present[static_cast<size_t>(k)] = 1;
      for (Index c = 0; c < C; ++c) out.values.at2(k, c) = acc[static_cast<size_t>(c)] / m;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("centroid hand fixtures") {
  // constant feature, full mask: centroid is the constant
  TensorD feat = TensorD::full({1, 3, 2, 2}, 2.5);
  TensorD mask = TensorD::full({1, 1, 2, 2}, 1.0);
  auto cs = compute_centroids(feat, mask);
  for (Index c = 0; c < 3; ++c) CHECK(cs.values.at2(0, c) == doctest::Approx(2.5));
  CHECK(cs.per_class_mass[0] == doctest::Approx(4.0));

  // [[1,2],[3,4]] with class 0 covering the top row -> 1.5
  TensorD f2 = TensorD::from({1, 1, 2, 2}, {1, 2, 3, 4});
  TensorD m2({1, 2, 2, 2});
  m2.at4(0, 0, 0, 0) = 1;
  m2.at4(0, 0, 0, 1) = 1;
  m2.at4(0, 1, 1, 0) = 1;
  m2.at4(0, 1, 1, 1) = 1;
  auto cs2 = compute_centroids(f2, m2);
  CHECK(cs2.values.at2(0, 0) == doctest::Approx(1.5));
  CHECK(cs2.values.at2(1, 0) == doctest::Approx(3.5));

  // all-zero mask: class flagged absent
  TensorD m3({1, 2, 2, 2});
  m3.at4(0, 0, 0, 0) = 1;
  auto cs3 = compute_centroids(f2, m3);
  CHECK(cs3.present[0] == 1);
  CHECK(cs3.present[1] == 0);
}

TEST_CASE("centroid oracle equivalence and mass conservation") {
  Rng rng(101);
  for (int it = 0; it < 20; ++it) {
    const Index B = 1 + static_cast<Index>(rng.uniform_int(0, 3));
    const Index C = 1 + static_cast<Index>(rng.uniform_int(0, 7));
    const Index H = 1 + static_cast<Index>(rng.uniform_int(0, 15));
    const Index W = 1 + static_cast<Index>(rng.uniform_int(0, 15));
    const Index K = 2 + static_cast<Index>(rng.uniform_int(0, 2));
    TensorD feat = TensorD::randn({B, C, H, W}, rng);
    TensorD mask = TensorD::rand_uniform({B, K, H, W}, rng, 0.0, 1.0);
    auto fast = compute_centroids(feat, mask);
    auto slow = brute_force_centroids(feat, mask);
    for (Index k = 0; k < K; ++k) {
      CHECK(fast.present[static_cast<size_t>(k)] == slow.present[static_cast<size_t>(k)]);
      CHECK(fast.per_class_mass[k] ==
            doctest::Approx(slow.per_class_mass[k]).epsilon(1e-12));
      if (!fast.present[static_cast<size_t>(k)]) continue;
      for (Index c = 0; c < C; ++c)
        CHECK(fast.values.at2(k, c) ==
              doctest::Approx(slow.values.at2(k, c)).epsilon(1e-9));
    }
    // tape version agrees with the plain one
    TapeD t;
    auto cv = compute_centroids(t, t.constant(feat), t.constant(mask));
    for (Index k = 0; k < K; ++k)
      for (Index c = 0; c < C; ++c)
        if (fast.present[static_cast<size_t>(k)])
          CHECK(cv.values.val().at2(k, c) ==
                doctest::Approx(fast.values.at2(k, c)).epsilon(1e-12));
    // mass conservation
    double msum = 0, mask_sum = mask.vec().sum();
    for (Index k = 0; k < K; ++k) msum += fast.per_class_mass[k];
    CHECK(msum == doctest::Approx(mask_sum).epsilon(1e-10));
  }

  // soft (softmax) masks: total mass is B*H*W
  Rng rng2(202);
  TensorD logits = TensorD::randn({2, 4, 5, 5}, rng2);
  TensorD soft = target_soft_mask(logits);
  TensorD feat = TensorD::randn({2, 3, 5, 5}, rng2);
  auto cs = compute_centroids(feat, soft);
  double msum = 0;
  for (Index k = 0; k < 4; ++k) msum += cs.per_class_mass[k];
  CHECK(msum == doctest::Approx(2 * 25).epsilon(1e-9));
}

TEST_CASE("target_soft_mask closed forms") {
  TensorD l1 = TensorD::from({1, 2, 1, 1}, {0.0, 0.0});
  TensorD p1 = target_soft_mask(l1);
  CHECK(p1[0] == doctest::Approx(0.5));
  CHECK(p1[1] == doctest::Approx(0.5));

  TensorD l2 = TensorD::from({1, 3, 1, 1}, {7.5, 7.5, 7.5});
  TensorD p2 = target_soft_mask(l2);
  for (Index i = 0; i < 3; ++i) CHECK(p2[i] == doctest::Approx(1.0 / 3));

  TensorD l3 = TensorD::from({1, 2, 1, 1}, {std::log(3.0), 0.0});
  TensorD p3 = target_soft_mask(l3);
  CHECK(p3[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(p3[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("memory bank EMA semantics") {
  MemoryBank<double> bank(1, 1, 0.9);
  CentroidSet<double> fresh{TensorD::from({1, 1}, {0.0}), TensorD::from({1}, {5.0}), {1}};
  bank.update(fresh);  // first observation overwrites
  CHECK(bank.centroids[0] == 0.0);
  fresh.values[0] = 1.0;
  bank.update(fresh);
  CHECK(bank.centroids[0] == doctest::Approx(0.9));  // rho weighs the fresh value

  // componentwise: old=(1,1), fresh=(2,0) -> (1.9, 0.1)
  MemoryBank<double> b2(1, 2, 0.9);
  CentroidSet<double> f2{TensorD::from({1, 2}, {1.0, 1.0}), TensorD::from({1}, {1.0}), {1}};
  b2.update(f2);
  f2.values = TensorD::from({1, 2}, {2.0, 0.0});
  b2.update(f2);
  CHECK(b2.centroids.at2(0, 0) == doctest::Approx(1.9));
  CHECK(b2.centroids.at2(0, 1) == doctest::Approx(0.1));

  // absent fresh class keeps the stored value
  CentroidSet<double> absent{TensorD::from({1, 2}, {9.0, 9.0}), TensorD::from({1}, {0.0}), {0}};
  b2.update(absent);
  CHECK(b2.centroids.at2(0, 0) == doctest::Approx(1.9));

  // EMA fixpoint: feeding the bank back leaves it unchanged
  CentroidSet<double> self{b2.centroids, TensorD::from({1}, {1.0}), {1}};
  b2.update(self);
  CHECK(b2.centroids.at2(0, 0) == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(b2.centroids.at2(0, 1) == doctest::Approx(0.1).epsilon(1e-15));

  // flipped convention: rho weighs the stored value
  MemoryBank<double> b3(1, 1, 0.9, /*fresh_conv=*/false);
  CentroidSet<double> f3{TensorD::from({1, 1}, {0.0}), TensorD::from({1}, {1.0}), {1}};
  b3.update(f3);
  f3.values[0] = 1.0;
  b3.update(f3);
  CHECK(b3.centroids[0] == doctest::Approx(0.1));

  // dimension mismatch is a contract violation
  MemoryBank<double> b4(2, 3);
  CentroidSet<double> bad{TensorD({2, 2}), TensorD({2}), {1, 1}};
  CHECK_THROWS(b4.update(bad));
}

TEST_CASE("partition assignment and reconstruction") {
  Rng rng(303);
  // H*W=10, P=4 -> sizes {3,3,2,2}
  auto pa = make_partition_assignment(10, 4, rng);
  std::vector<int> sizes(4, 0);
  for (int p : pa.pixel_to_partition) sizes[static_cast<size_t>(p)]++;
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<int>{2, 2, 3, 3});

  CHECK_THROWS(make_partition_assignment(10, 0, rng));
  CHECK_THROWS(make_partition_assignment(10, 11, rng));

  TensorD logits = TensorD::randn({1, 3, 4, 5}, rng);
  TensorD soft = target_soft_mask(logits);

  // P=1: identity split
  auto pa1 = make_partition_assignment(20, 1, rng);
  auto parts1 = partition_prediction(soft, pa1);
  CHECK(parts1.size() == 1);
  for (Index i = 0; i < soft.numel(); ++i) CHECK(parts1[0][i] == soft[i]);

  // P=H*W: every partition one pixel
  auto paN = make_partition_assignment(20, 20, rng);
  auto partsN = partition_prediction(soft, paN);
  CHECK(partsN.size() == 20);

  // random P: disjoint cover, bitwise reconstruction
  auto pa4 = make_partition_assignment(20, 4, rng);
  auto parts = partition_prediction(soft, pa4);
  TensorD sum(soft.shape());
  for (const auto& p : parts) sum.vec() += p.vec();
  for (Index i = 0; i < soft.numel(); ++i) CHECK(sum[i] == soft[i]);

  // whole-image centroid equals the mass-weighted mean of partition centroids
  TensorD feat = TensorD::randn({1, 6, 4, 5}, rng);
  auto whole = compute_centroids(feat, soft);
  for (Index k = 0; k < 3; ++k) {
    for (Index c = 0; c < 6; ++c) {
      double acc = 0, mass = 0;
      for (const auto& pm : parts) {
        auto pc = compute_centroids(feat, pm);
        if (!pc.present[static_cast<size_t>(k)]) continue;
        acc += pc.values.at2(k, c) * pc.per_class_mass[k];
        mass += pc.per_class_mass[k];
      }
      CHECK(acc / mass == doctest::Approx(whole.values.at2(k, c)).epsilon(1e-9));
    }
  }

  // tape-side partition masks keep gradients flowing into the soft prediction
  TapeD t;
  VarD lv = t.input(logits, true);
  VarD sv = target_soft_mask(t, lv);
  auto vparts = partition_prediction(t, sv, pa4);
  VarD acc = t.scalar(0.0);
  for (auto& p : vparts) acc = op::add(acc, op::sum_all(op::square(p)));
  t.backward(acc);
  CHECK(t.grad(lv).vec().abs().sum() > 0.0);
}

TEST_CASE("centroid gradients w.r.t. features and soft mask") {
  Rng rng(404);
  TensorD feat = TensorD::randn({1, 4, 3, 3}, rng);
  TensorD logits = TensorD::randn({1, 3, 3, 3}, rng);
  TensorD mix = TensorD::randn({3, 4}, rng);

  auto wrt_feat = [&](TapeD& t, VarD v) {
    auto cv = compute_centroids(t, v, target_soft_mask(t, t.constant(logits)));
    return op::sum_all(op::mul(cv.values, t.constant(mix)));
  };
  CHECK(check_tape_fn(wrt_feat, feat).pass);

  auto wrt_logits = [&](TapeD& t, VarD v) {
    auto cv = compute_centroids(t, t.constant(feat), target_soft_mask(t, v));
    return op::sum_all(op::mul(cv.values, t.constant(mix)));
  };
  CHECK(check_tape_fn(wrt_logits, logits).pass);
}
