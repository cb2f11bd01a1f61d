#include <doctest.h>

#include "cclseg/style.hpp"
#include "test_helpers.hpp"

using namespace cclseg;
using namespace cclseg::testing;
namespace op = cclseg::ad;

TEST_CASE("adain identity and stat matching") {
  Rng rng(53);
  TensorD feat = TensorD::randn({2, 3, 8, 8}, rng);

  // style = stats(content) reproduces the content
  TapeD t;
  VarD f = t.constant(feat);
  VarD mu = op::inst_mean(f);
  VarD sd = op::inst_std(f, kEpsStd);
  VarD out = adain(t, f, mu, sd);
  for (Index i = 0; i < feat.numel(); ++i)
    CHECK(out.val()[i] == doctest::Approx(feat[i]).epsilon(1e-5));

  // output carries the requested per-channel stats
  TensorD smu = TensorD::randn({2, 3}, rng);
  TensorD ssd = TensorD::rand_uniform({2, 3}, rng, 0.5, 3.0);
  TapeD t2;
  VarD out2 = adain(t2, t2.constant(feat), t2.constant(smu), t2.constant(ssd));
  VarD omu = op::inst_mean(out2);
  VarD osd = op::inst_std(out2, kEpsStd);
  for (Index i = 0; i < 6; ++i) {
    CHECK(omu.val()[i] == doctest::Approx(smu[i]).epsilon(1e-5));
    CHECK(osd.val()[i] == doctest::Approx(ssd[i]).epsilon(1e-5));
  }

  // zero-variance channel stays finite through the floor
  TensorD flat = TensorD::full({1, 1, 4, 4}, 0.7);
  TapeD t3;
  VarD out3 = adain(t3, t3.constant(flat), t3.constant(TensorD::from({1, 1}, {2.0})),
                    t3.constant(TensorD::from({1, 1}, {3.0})), true);
  CHECK(out3.val().all_finite());
}

TEST_CASE("rain losses: KL fixture and weight linearity") {
  Rng rng(59);
  StyleModule<double> sm(rng);
  TensorD content = TensorD::rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  TensorD style = TensorD::rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  TensorD eps({1, sm.zdim});

  // zeroed posterior head: z_mu = 0, z_logvar = 0 -> KL = 0
  StyleModule<double> sm0(rng);
  sm0.visit_params([](const std::string& name, TensorD& t) {
    if (name.find("enc_mu") != std::string::npos ||
        name.find("enc_logvar") != std::string::npos)
      t.vec().setZero();
  });
  TapeD t;
  Binding<double> bind(t, false);
  auto rl0 = sm0.rain_losses(t, bind, t.constant(content), t.constant(style),
                             t.constant(eps));
  CHECK(rl0.kl.item() == doctest::Approx(0.0).epsilon(1e-15));

  // total recomposes linearly from the parts
  TapeD t2;
  Binding<double> bind2(t2, false);
  auto rl = sm.rain_losses(t2, bind2, t2.constant(content), t2.constant(style),
                           t2.constant(eps));
  const double recomposed = rl.content.item() + 5.0 * rl.style.item() +
                            rl.kl.item() + 5.0 * rl.rec.item();
  CHECK(rl.total.item() == doctest::Approx(recomposed).epsilon(1e-12));

  // doubling lambda_s moves the total by exactly L_s * 5
  RainWeights<double> w2;
  w2.lambda_s = 10.0;
  TapeD t3;
  Binding<double> bind3(t3, false);
  auto rl2 = sm.rain_losses(t3, bind3, t3.constant(content), t3.constant(style),
                            t3.constant(eps), w2);
  CHECK(rl2.total.item() - rl.total.item() ==
        doctest::Approx(5.0 * rl.style.item()).epsilon(1e-9));
  CHECK(rl.generated.val().all_finite());
}

TEST_CASE("stylize_with_latent determinism and pretrain guard") {
  Rng rng(61);
  StyleModule<double> sm(rng);
  TensorD content = TensorD::rand_uniform({2, 1, 8, 8}, rng, 0.0, 1.0);
  TensorD style_img = TensorD::rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  TensorD eps = TensorD::randn({1, sm.zdim}, rng);

  // guard: refuse before pretraining
  {
    TapeD t;
    Binding<double> bind(t, false);
    CHECK_THROWS_WITH_AS(
        sm.stylize_with_latent(t, bind, t.constant(content),
                               sm.image_style_stats(style_img), t.constant(eps)),
        doctest::Contains("not pretrained"), std::runtime_error);
  }
  sm.pretrained = true;
  TensorD base = sm.image_style_stats(style_img);

  auto run = [&]() {
    TapeD t;
    Binding<double> bind(t, false);
    return sm.stylize_with_latent(t, bind, t.constant(content), base, t.constant(eps))
        .val();
  };
  TensorD g1 = run(), g2 = run();
  CHECK(g1.shape() == content.shape());
  for (Index i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);

  // epsilon moves the output
  TensorD eps2 = TensorD::randn({1, sm.zdim}, rng);
  TapeD t;
  Binding<double> bind(t, false);
  TensorD g3 =
      sm.stylize_with_latent(t, bind, t.constant(content), base, t.constant(eps2)).val();
  CHECK((g1.vec() - g3.vec()).abs().sum() > 0.0);
}

TEST_CASE("gradient of a downstream loss w.r.t. epsilon") {
  Rng rng(67);
  StyleModule<double> sm(rng);
  sm.pretrained = true;
  TensorD content = TensorD::rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  TensorD base = sm.image_style_stats(TensorD::rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0));
  TensorD eps = TensorD::randn({1, sm.zdim}, rng);

  // proxy task loss on the stylized image
  auto fn = [&](TapeD& t, VarD v) {
    Binding<double> bind(t, false);
    VarD gen = sm.stylize_with_latent(t, bind, t.constant(content), base, v);
    return op::mean_all(op::square(op::add_scalar(gen, -0.3)));
  };
  auto rep = check_tape_fn(fn, eps);
  CHECK(rep.pass);

  TapeD t;
  Binding<double> bind(t, false);
  VarD ev = t.input(eps, true);
  VarD gen = sm.stylize_with_latent(t, bind, t.constant(content), base, ev);
  VarD loss = op::mean_all(op::square(op::add_scalar(gen, -0.3)));
  t.backward(loss);
  CHECK(t.grad(ev).vec().abs().sum() > 0.0);
}

TEST_CASE("adversarial epsilon step") {
  // zero gradient: unchanged
  TensorD eps = TensorD::from({2}, {1.0, -0.5});
  TensorD zero({2});
  TensorD out = adversarial_epsilon_step(eps, zero, 1.0);
  CHECK(out[0] == 1.0);
  CHECK(out[1] == -0.5);

  // 1-D toy: f(e) = -e^2, ascent from 1 with eta=0.1 -> 0.8
  TensorD e1 = TensorD::from({1}, {1.0});
  TensorD g1 = TensorD::from({1}, {-2.0});  // f'(1)
  CHECK(adversarial_epsilon_step(e1, g1, 0.1)[0] == doctest::Approx(0.8));

  // descent flag flips the direction
  CHECK(adversarial_epsilon_step(e1, g1, 0.1, true)[0] == doctest::Approx(1.2));

  // repeated ascent on the concave toy increases f monotonically to the max
  double e = 1.0, prev = -e * e;
  for (int i = 0; i < 50; ++i) {
    TensorD cur = TensorD::from({1}, {e});
    TensorD grad = TensorD::from({1}, {-2.0 * e});
    e = adversarial_epsilon_step(cur, grad, 0.1)[0];
    const double f = -e * e;
    CHECK(f >= prev - 1e-15);
    prev = f;
  }
  CHECK(std::abs(e) < 1e-4);

  // non-finite gradient skips the update
  TensorD bad = TensorD::from({1}, {std::numeric_limits<double>::quiet_NaN()});
  CHECK(adversarial_epsilon_step(e1, bad, 0.1)[0] == 1.0);

  // clip keeps ||eps|| <= 3*sqrt(Z)
  TensorD big = TensorD::from({1}, {0.0});
  TensorD huge = TensorD::from({1}, {100.0});
  TensorD clipped = adversarial_epsilon_step(big, huge, 1.0);
  CHECK(std::abs(clipped[0]) == doctest::Approx(3.0));
}
