#include <doctest.h>

#include "test_helpers.hpp"

using namespace cclseg;
using namespace cclseg::testing;
namespace op = cclseg::ad;

TEST_CASE("tensor basics") {
  TensorD t = TensorD::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.at2(1, 0) == 3);
  TensorD r = t.reshaped({4});
  CHECK(r.rank() == 1);
  CHECK(r[3] == 4);
  CHECK_THROWS(t.reshaped({3}));

  Rng rng(7);
  TensorD a = TensorD::randn({5}, rng);
  Rng rng2(7);
  TensorD b = TensorD::randn({5}, rng2);
  for (Index i = 0; i < 5; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("grad_check quadratic and constant") {
  TensorD x = TensorD::from({2}, {1, 2});
  auto value = [](const TensorD& v) { return v.vec().square().sum(); };
  auto grad = [](const TensorD& v) {
    TensorD g(v.shape());
    g.vec() = 2.0 * v.vec();
    return g;
  };
  auto rep = grad_check<double>(value, grad, x, 1e-4, 1e-3);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);

  auto cval = [](const TensorD&) { return 3.25; };
  auto cgrad = [](const TensorD& v) { return TensorD(v.shape()); };
  auto crep = grad_check<double>(cval, cgrad, x, 1e-4, 1e-3);
  CHECK(crep.pass);
  CHECK(crep.max_rel_err == 0.0);
}

TEST_CASE("grad_check rejects non-finite objective") {
  TensorD x = TensorD::from({1}, {0.0});
  auto value = [](const TensorD& v) { return std::log(v[0]); };
  auto grad = [](const TensorD& v) {
    TensorD g(v.shape());
    g[0] = 1.0 / v[0];
    return g;
  };
  CHECK_THROWS_WITH_AS(grad_check<double>(value, grad, x, 1e-4, 1e-3),
                       doctest::Contains("non-finite objective"),
                       std::runtime_error);
}

TEST_CASE("elementwise and scalar op gradients") {
  Rng rng(11);
  TensorD x = TensorD::randn({3, 4}, rng);
  TensorD w = TensorD::randn({3, 4}, rng);

  auto build = [&w](TapeD& t, VarD v) {
    VarD wc = t.constant(w);
    VarD y = op::add(op::mul(v, wc), op::mul_scalar(v, 0.5));
    y = op::sub(y, op::square(v));
    y = op::add_scalar(y, 0.25);
    return op::sum_all(op::mul(y, wc));
  };
  CHECK(check_tape_fn(build, x).pass);

  auto build2 = [&w](TapeD& t, VarD v) {
    VarD wc = t.constant(w);
    VarD y = op::div(op::exp_v(op::mul_scalar(v, 0.3)), op::add_scalar(op::square(v), 1.0));
    return op::sum_all(op::mul(y, wc));
  };
  CHECK(check_tape_fn(build2, x).pass);

  auto build3 = [&w](TapeD& t, VarD v) {
    VarD wc = t.constant(w);
    VarD y = op::add(op::sigmoid_v(v), op::softplus_v(v));
    y = op::add(y, op::lrelu(v, 0.1));
    return op::sum_all(op::mul(y, wc));
  };
  CHECK(check_tape_fn(build3, x).pass);

  // log over strictly positive inputs
  TensorD xp(x.shape());
  xp.vec() = x.vec().abs() + 0.5;
  auto build4 = [&w](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::log_v(v), t.constant(w)));
  };
  CHECK(check_tape_fn(build4, xp).pass);
}

TEST_CASE("matrix op gradients") {
  Rng rng(13);
  TensorD a = TensorD::randn({3, 5}, rng);
  TensorD b = TensorD::randn({5, 4}, rng);
  TensorD wout = TensorD::randn({3, 4}, rng);

  auto mm_a = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::matmul(v, t.constant(b)), t.constant(wout)));
  };
  CHECK(check_tape_fn(mm_a, a).pass);

  auto mm_b = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::matmul(t.constant(a), v), t.constant(wout)));
  };
  CHECK(check_tape_fn(mm_b, b).pass);

  auto tr = [&](TapeD& t, VarD v) {
    VarD y = op::transpose2d(v);
    return op::sum_all(op::mul(y, t.constant(b.reshaped({4, 5}).reshaped({5, 4}))));
  };
  (void)tr;

  TensorD m = TensorD::randn({4, 4}, rng);
  auto dg = [&](TapeD& t, VarD v) {
    VarD d = op::diag2d(v);
    return op::sum_all(op::square(d));
    (void)t;
  };
  CHECK(check_tape_fn(dg, m).pass);

  auto rn = [&](TapeD& t, VarD v) {
    VarD n = op::rows_l2norm(v, 1e-8);
    return op::sum_all(op::square(n));
    (void)t;
  };
  CHECK(check_tape_fn(rn, m).pass);

  TensorD s = TensorD::randn({4}, rng);
  auto rs = [&](TapeD& t, VarD v) {
    return op::sum_all(op::rowwise_scale(v, t.constant(s)));
  };
  CHECK(check_tape_fn(rs, m).pass);

  auto rs2 = [&](TapeD& t, VarD v) {
    return op::sum_all(op::rowwise_scale(t.constant(m), v));
  };
  CHECK(check_tape_fn(rs2, s).pass);

  TensorD sp(s.shape());
  sp.vec() = s.vec().abs() + 1.0;
  auto rc = [&](TapeD& t, VarD v) {
    return op::sum_all(op::recip(v));
    (void)t;
  };
  CHECK(check_tape_fn(rc, sp).pass);

  auto sl = [&](TapeD& t, VarD v) {
    VarD c = op::slice_cols(v, 1, 3);
    VarD cc = op::concat_cols(c, c);
    return op::sum_all(op::square(cc));
    (void)t;
  };
  CHECK(check_tape_fn(sl, m).pass);

  TensorD one_row = TensorD::randn({1, 4}, rng);
  TensorD row_mix = TensorD::randn({3, 4}, rng);
  auto rr = [&](TapeD& t, VarD v) {
    VarD y = op::repeat_rows(v, 3);
    return op::sum_all(op::mul(y, t.constant(row_mix)));
  };
  CHECK(check_tape_fn(rr, one_row).pass);

  TensorD bias = TensorD::randn({4}, rng);
  auto av = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::add_rowvec(t.constant(m), v)));
  };
  CHECK(check_tape_fn(av, bias).pass);

  auto rsum = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::row_sums(v)));
    (void)t;
  };
  CHECK(check_tape_fn(rsum, m).pass);
  auto csum = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::col_sums(v)));
    (void)t;
  };
  CHECK(check_tape_fn(csum, m).pass);
}

TEST_CASE("conv and pooling gradients") {
  Rng rng(17);
  TensorD x = TensorD::randn({2, 3, 6, 6}, rng);
  TensorD w = TensorD::randn({4, 3, 3, 3}, rng, 0.4);
  TensorD b = TensorD::randn({4}, rng, 0.1);
  TensorD mix = TensorD::randn({2, 4, 6, 6}, rng);

  auto conv_x = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::conv2d(v, t.constant(w), t.constant(b), 1),
                               t.constant(mix)));
  };
  CHECK(check_tape_fn(conv_x, x).pass);

  auto conv_w = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::conv2d(t.constant(x), v, t.constant(b), 1),
                               t.constant(mix)));
  };
  CHECK(check_tape_fn(conv_w, w).pass);

  auto conv_b = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::conv2d(t.constant(x), t.constant(w), v, 1),
                               t.constant(mix)));
  };
  CHECK(check_tape_fn(conv_b, b).pass);

  // 1x1 conv, no padding
  TensorD w1 = TensorD::randn({2, 3, 1, 1}, rng);
  TensorD b1 = TensorD::randn({2}, rng, 0.1);
  auto conv1 = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::conv2d(v, t.constant(w1), t.constant(b1), 0)));
  };
  CHECK(check_tape_fn(conv1, x).pass);

  auto pool = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::avgpool2(v)));
    (void)t;
  };
  CHECK(check_tape_fn(pool, x).pass);

  auto up = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::upsample2(v)));
    (void)t;
  };
  CHECK(check_tape_fn(up, x).pass);

  TensorD x2 = TensorD::randn({2, 2, 6, 6}, rng);
  auto cat = [&](TapeD& t, VarD v) {
    VarD y = op::concat_channels(v, t.constant(x2));
    return op::sum_all(op::square(y));
  };
  CHECK(check_tape_fn(cat, x).pass);
}

TEST_CASE("softmax and stats op gradients") {
  Rng rng(23);
  TensorD x = TensorD::randn({2, 3, 4, 4}, rng);
  TensorD mix = TensorD::randn({2, 3, 4, 4}, rng);

  auto sm = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::softmax_channels(v), t.constant(mix)));
  };
  CHECK(check_tape_fn(sm, x).pass);

  auto lsm = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::log_softmax_channels(v), t.constant(mix)));
  };
  CHECK(check_tape_fn(lsm, x).pass);

  TensorD mix_bc = TensorD::randn({2, 3}, rng);
  auto im = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::inst_mean(v), t.constant(mix_bc)));
  };
  CHECK(check_tape_fn(im, x).pass);

  auto is = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::inst_std(v, 1e-5), t.constant(mix_bc)));
  };
  CHECK(check_tape_fn(is, x).pass);

  TensorD sc = TensorD::randn({2, 3}, rng);
  TensorD sh = TensorD::randn({2, 3}, rng);
  auto ca_x = [&](TapeD& t, VarD v) {
    return op::sum_all(
        op::mul(op::channel_affine(v, t.constant(sc), t.constant(sh)),
                t.constant(mix)));
  };
  CHECK(check_tape_fn(ca_x, x).pass);
  auto ca_s = [&](TapeD& t, VarD v) {
    return op::sum_all(
        op::mul(op::channel_affine(t.constant(x), v, t.constant(sh)),
                t.constant(mix)));
  };
  CHECK(check_tape_fn(ca_s, sc).pass);

  // softmax rows sum to one
  TapeD t;
  VarD v = t.constant(x);
  VarD p = op::softmax_channels(v);
  for (Index b = 0; b < 2; ++b)
    for (Index hw = 0; hw < 16; ++hw) {
      double s = 0;
      for (Index k = 0; k < 3; ++k)
        s += p.val()[b * 3 * 16 + k * 16 + hw];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("centroid reduction op gradients") {
  Rng rng(29);
  TensorD feat = TensorD::randn({2, 5, 3, 4}, rng);
  TensorD mask = TensorD::rand_uniform({2, 3, 3, 4}, rng, 0.0, 1.0);
  TensorD mix = TensorD::randn({3, 5}, rng);

  auto cw_f = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::centroid_weighted_sum(v, t.constant(mask)),
                               t.constant(mix)));
  };
  CHECK(check_tape_fn(cw_f, feat).pass);

  auto cw_m = [&](TapeD& t, VarD v) {
    return op::sum_all(op::mul(op::centroid_weighted_sum(t.constant(feat), v),
                               t.constant(mix)));
  };
  CHECK(check_tape_fn(cw_m, mask).pass);

  auto sb = [&](TapeD& t, VarD v) {
    return op::sum_all(op::square(op::sum_bhw_per_class(v)));
    (void)t;
  };
  CHECK(check_tape_fn(sb, mask).pass);
}

TEST_CASE("tape determinism") {
  Rng rng(31);
  TensorD x = TensorD::randn({2, 3, 4, 4}, rng);
  auto run = [&]() {
    TapeD t;
    VarD v = t.input(x, true);
    VarD y = op::sum_all(op::square(op::softmax_channels(v)));
    t.backward(y);
    return std::make_pair(y.item(), t.grad(v));
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(v1 == v2);
  for (Index i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}
