#include <doctest.h>

#include "cclseg/segnet.hpp"
#include "test_helpers.hpp"

using namespace cclseg;
using namespace cclseg::testing;
namespace op = cclseg::ad;

namespace {

TensorD onehot_from_classmap(const std::vector<int>& cls, Index K, Index H, Index W) {
  TensorD y({1, K, H, W});
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w)
      y.at4(0, cls[static_cast<size_t>(h * W + w)], h, w) = 1.0;
  return y;
}

}  // namespace

TEST_CASE("segnet shape contract and determinism") {
  Rng rng(41);
  SegNet<double> net(4, rng);
  TensorD x = TensorD::rand_uniform({2, 1, 16, 16}, rng, 0.0, 1.0);

  TapeD t;
  Binding<double> bind(t, false);
  auto out = net.forward(bind, t.constant(x));
  CHECK(out.logits.val().shape() == std::vector<Index>{2, 4, 16, 16});
  CHECK(out.decoder_features.val().shape() ==
        std::vector<Index>{2, 32, 16, 16});
  CHECK(out.logits.val().all_finite());

  // identical inputs give identical outputs
  TapeD t2;
  Binding<double> bind2(t2, false);
  auto out2 = net.forward(bind2, t2.constant(x));
  for (Index i = 0; i < out.logits.val().numel(); ++i)
    CHECK(out.logits.val()[i] == out2.logits.val()[i]);

  // spatial dims must divide by 4
  TapeD t3;
  Binding<double> bind3(t3, false);
  CHECK_THROWS(net.forward(bind3, t3.constant(TensorD({1, 1, 6, 6}))));
}

TEST_CASE("seg_loss closed forms") {
  const Index K = 2, H = 4, W = 4;
  // balanced labels, uniform logits: CE = ln 2 per pixel
  std::vector<int> cls(16, 0);
  for (int i = 8; i < 16; ++i) cls[static_cast<size_t>(i)] = 1;
  TensorD y = onehot_from_classmap(cls, K, H, W);
  TensorD logits({1, K, H, W});  // all zeros -> uniform posterior

  TapeD t;
  const double L = seg_loss(t, t.constant(logits), y).item();
  const double hw = 16.0;
  const double inter = 0.5 * hw / 2, psum = 0.5 * hw, ysum = hw / 2;
  const double jac = 1.0 - (inter + 1.0) / (psum + ysum - inter + 1.0);
  CHECK(L == doctest::Approx(std::log(2.0) + jac).epsilon(1e-12));

  // strongly correct logits: loss -> 0 (both CE and Jaccard terms)
  TensorD strong({1, K, H, W});
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w) {
      const int c = cls[static_cast<size_t>(h * W + w)];
      strong.at4(0, c, h, w) = 100.0;
      strong.at4(0, 1 - c, h, w) = -100.0;
    }
  TapeD t2;
  CHECK(seg_loss(t2, t2.constant(strong), y).item() < 1e-6);

  // perfect single-class image: Jaccard contributes 0 for that class
  std::vector<int> ones(16, 1);
  TensorD y1 = onehot_from_classmap(ones, K, H, W);
  TensorD s1({1, K, H, W});
  for (Index i = 0; i < 16; ++i) {
    s1[i] = -100.0;       // class 0 plane
    s1[16 + i] = 100.0;   // class 1 plane
  }
  TapeD t3;
  CHECK(seg_loss(t3, t3.constant(s1), y1).item() < 1e-6);
}

TEST_CASE("seg_loss nonnegative and differentiable") {
  Rng rng(43);
  const Index K = 3, H = 4, W = 4;
  std::vector<int> cls(16);
  for (auto& c : cls) c = rng.uniform_int(0, 2);
  TensorD y = onehot_from_classmap(cls, K, H, W);

  for (int it = 0; it < 10; ++it) {
    TensorD logits = TensorD::randn({1, K, H, W}, rng, 2.0);
    TapeD t;
    CHECK(seg_loss(t, t.constant(logits), y).item() >= 0.0);
  }

  TensorD logits = TensorD::randn({1, K, H, W}, rng);
  auto fn = [&](TapeD& t, VarD v) { return seg_loss(t, v, y); };
  CHECK(check_tape_fn(fn, logits).pass);
}

TEST_CASE("segnet end-to-end gradient flows into weights") {
  Rng rng(47);
  SegNet<double> net(2, rng);
  TensorD x = TensorD::rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  std::vector<int> cls(64, 0);
  for (int i = 0; i < 32; ++i) cls[static_cast<size_t>(i)] = 1;
  TensorD y = onehot_from_classmap(cls, 2, 8, 8);

  TapeD t;
  Binding<double> bind(t, true);
  auto out = net.forward(bind, t.constant(x));
  VarD loss = seg_loss(t, out.logits, y);
  t.backward(loss);
  double gsum = 0;
  for (const auto& e : bind.entries()) gsum += t.grad(e.second).vec().abs().sum();
  CHECK(gsum > 0.0);
  CHECK(std::isfinite(gsum));
}
