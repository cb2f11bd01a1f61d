#pragma once

#include "cclseg/nn.hpp"

// AdaIN-based style transfer with a VAE over style statistics. A standard
// normal latent epsilon perturbs the style; pushing epsilon up the gradient
// of the task loss yields progressively harder stylizations.

namespace cclseg {

inline constexpr double kEpsStd = 1e-5;

template <class S>
struct StyleStats {
  Tensor<S> mu;     // [C]
  Tensor<S> sigma;  // [C], >= eps_std
};

// out = sigma_s * (x - mu(x)) / sigma(x) + mu_s, per channel per instance.
// Stats are [B,C]; a zero-variance channel is floored (and reported once).
template <class S>
Var<S> adain(Tape<S>&, Var<S> content_feat, Var<S> style_mu, Var<S> style_sigma,
             bool quiet = false) {
  Var<S> mu_c = ad::inst_mean(content_feat);
  Var<S> sd_c = ad::inst_std(content_feat, S(kEpsStd));
  if (!quiet) {
    for (Index i = 0; i < sd_c.val().numel(); ++i)
      if (sd_c.val()[i] <= S(kEpsStd)) {
        warn("adain: content channel with near-zero variance, std floored");
        break;
      }
  }
  Var<S> inv = ad::recip(sd_c);
  Var<S> normalized =
      ad::channel_affine(content_feat, inv, ad::neg(ad::mul(mu_c, inv)));
  return ad::channel_affine(normalized, style_sigma, style_mu);
}

template <class S>
struct RainWeights {
  S lambda_s = S(5);
  S lambda_kl = S(1);
  S lambda_rec = S(5);
};

template <class S>
struct RainLosses {
  Var<S> content;   // L_c
  Var<S> style;     // L_s
  Var<S> kl;        // L_KL
  Var<S> rec;       // L_Rec
  Var<S> total;     // L_c + 5 L_s + L_KL + 5 L_Rec
  Var<S> generated; // stylized image [B,1,H,W]
};

template <class S>
class StyleModule {
 public:
  static constexpr Index kC1 = 8, kC2 = 16, kC3 = 16;
  static constexpr Index kStatsDim = 2 * kC3;
  Index zdim = 16;
  bool pretrained = false;

  StyleModule() = default;
  explicit StyleModule(Rng& rng, Index zdim_ = 16)
      : zdim(zdim_),
        e1_(Conv2d<S>::make(1, kC1, 3, 1, rng)),
        e2_(Conv2d<S>::make(kC1, kC2, 3, 1, rng)),
        e3_(Conv2d<S>::make(kC2, kC3, 3, 1, rng)),
        d1_(Conv2d<S>::make(kC3, kC2, 3, 1, rng)),
        d2_(Conv2d<S>::make(kC2, kC1, 3, 1, rng)),
        d3_(Conv2d<S>::make(kC1, kC1, 3, 1, rng)),
        d4_(Conv2d<S>::make(kC1, 1, 1, 0, rng)),
        enc_fc_(Linear<S>::make(kStatsDim, 32, rng)),
        enc_mu_(Linear<S>::make(32, zdim_, rng)),
        enc_logvar_(Linear<S>::make(32, zdim_, rng)),
        dec_fc_(Linear<S>::make(zdim_, 32, rng)),
        dec_out_(Linear<S>::make(32, kStatsDim, rng)) {}

  struct EncoderTaps {
    Var<S> b1, b2, b3;
  };

  EncoderTaps encode(Binding<S>& bind, Var<S> img) {
    EncoderTaps taps;
    taps.b1 = ad::silu(e1_.forward(bind, img));
    taps.b2 = ad::silu(e2_.forward(bind, ad::avgpool2(taps.b1)));
    taps.b3 = ad::silu(e3_.forward(bind, ad::avgpool2(taps.b2)));
    return taps;
  }

  Var<S> decode(Binding<S>& bind, Var<S> feat) {
    Var<S> u = ad::silu(d1_.forward(bind, feat));
    u = ad::silu(d2_.forward(bind, ad::upsample2(u)));
    u = ad::silu(d3_.forward(bind, ad::upsample2(u)));
    return ad::sigmoid_v(d4_.forward(bind, u));
  }

  // Per-image style statistics of the final encoder block: [B, 2*C3].
  Var<S> stats_vec(Tape<S>&, Var<S> b3) {
    return ad::concat_cols(ad::inst_mean(b3), ad::inst_std(b3, S(kEpsStd)));
  }

  struct VaePosterior {
    Var<S> mu, logvar;
  };
  VaePosterior vae_encode(Binding<S>& bind, Var<S> stats) {
    Var<S> h = ad::silu(enc_fc_.forward(bind, stats));
    return VaePosterior{enc_mu_.forward(bind, h), enc_logvar_.forward(bind, h)};
  }

  struct DecodedStyle {
    Var<S> mu, sigma;  // each [B, C3]
  };
  DecodedStyle vae_decode(Binding<S>& bind, Var<S> z) {
    Var<S> h = ad::silu(dec_fc_.forward(bind, z));
    Var<S> o = dec_out_.forward(bind, h);
    Var<S> mu = ad::slice_cols(o, 0, kC3);
    Var<S> sigma = ad::add_scalar(ad::softplus_v(ad::slice_cols(o, kC3, kStatsDim)),
                                  S(kEpsStd));
    return DecodedStyle{mu, sigma};
  }

  // Full training pass: stylize content with a VAE-sampled version of the
  // style image's statistics and assemble the four-part loss.
  RainLosses<S> rain_losses(Tape<S>& tape, Binding<S>& bind, Var<S> content_img,
                            Var<S> style_img, Var<S> epsilon,
                            const RainWeights<S>& w = {}) {
    CCLSEG_REQUIRE(content_img.val().size(2) == style_img.val().size(2) &&
                       content_img.val().size(3) == style_img.val().size(3),
                   "rain_losses: image sizes differ");
    EncoderTaps ct = encode(bind, content_img);
    EncoderTaps st = encode(bind, style_img);

    Var<S> s_style = stats_vec(tape, st.b3);
    VaePosterior post = vae_encode(bind, s_style);
    CCLSEG_REQUIRE(epsilon.val().same_shape(post.mu.val()),
                   "rain_losses: epsilon shape must match posterior");
    Var<S> z = ad::add(post.mu,
                       ad::mul(ad::exp_v(ad::mul_scalar(post.logvar, S(0.5))), epsilon));
    DecodedStyle dec = vae_decode(bind, z);

    // broadcast one style row across the content batch if needed
    Var<S> mu_b = dec.mu, sd_b = dec.sigma;
    const Index bc = content_img.val().size(0);
    if (dec.mu.val().size(0) == 1 && bc > 1) {
      mu_b = ad::repeat_rows(dec.mu, bc);
      sd_b = ad::repeat_rows(dec.sigma, bc);
    }
    Var<S> target = adain(tape, ct.b3, mu_b, sd_b, true);
    Var<S> gen = decode(bind, target);
    EncoderTaps gt = encode(bind, gen);

    RainLosses<S> out;
    out.generated = gen;
    out.content = ad::mean_all(ad::square(ad::sub(gt.b3, target)));

    auto stat_mse = [&](Var<S> a, Var<S> b) {
      Var<S> dm = ad::mean_all(ad::square(ad::sub(ad::inst_mean(a), ad::inst_mean(b))));
      Var<S> ds = ad::mean_all(ad::square(
          ad::sub(ad::inst_std(a, S(kEpsStd)), ad::inst_std(b, S(kEpsStd)))));
      return ad::add(dm, ds);
    };
    // style statistics are matched to the style image across all encoder
    // blocks; when batch sizes differ the comparison uses block means
    if (content_img.val().size(0) == style_img.val().size(0)) {
      out.style = ad::add(ad::add(stat_mse(gt.b1, st.b1), stat_mse(gt.b2, st.b2)),
                          stat_mse(gt.b3, st.b3));
    } else {
      auto pooled_mse = [&](Var<S> a, Var<S> b) {
        Var<S> am = ad::mean_all(ad::inst_mean(a)), bm = ad::mean_all(ad::inst_mean(b));
        Var<S> as = ad::mean_all(ad::inst_std(a, S(kEpsStd)));
        Var<S> bs = ad::mean_all(ad::inst_std(b, S(kEpsStd)));
        return ad::add(ad::square(ad::sub(am, bm)), ad::square(ad::sub(as, bs)));
      };
      out.style = ad::add(ad::add(pooled_mse(gt.b1, st.b1), pooled_mse(gt.b2, st.b2)),
                          pooled_mse(gt.b3, st.b3));
    }

    // KL(q(z|s) || N(0,I)), summed over latent dims, mean over batch
    Var<S> kl_terms = ad::sub(ad::add_scalar(post.logvar, S(1)),
                              ad::add(ad::square(post.mu), ad::exp_v(post.logvar)));
    out.kl = ad::mul_scalar(ad::sum_all(kl_terms),
                            S(-0.5) / static_cast<S>(post.mu.val().size(0)));

    Var<S> recon = ad::concat_cols(dec.mu, dec.sigma);
    out.rec = ad::mean_all(ad::square(ad::sub(s_style, recon)));

    out.total = ad::add(
        ad::add(out.content, ad::mul_scalar(out.style, w.lambda_s)),
        ad::add(ad::mul_scalar(out.kl, w.lambda_kl), ad::mul_scalar(out.rec, w.lambda_rec)));
    return out;
  }

  // Stylize a content batch with a stored base style perturbed by epsilon.
  // epsilon is [1, Z]; differentiable w.r.t. it when bound as a leaf.
  Var<S> stylize_with_latent(Tape<S>& tape, Binding<S>& bind, Var<S> content_img,
                             const Tensor<S>& base_style_stats, Var<S> epsilon) {
    CCLSEG_REQUIRE(pretrained, "style module not pretrained");
    CCLSEG_REQUIRE(base_style_stats.rank() == 2 &&
                       base_style_stats.size(0) == 1 &&
                       base_style_stats.size(1) == kStatsDim,
                   "stylize_with_latent: base style stats must be [1, 2*C3]");
    EncoderTaps ct = encode(bind, content_img);
    VaePosterior post = vae_encode(bind, tape.constant(base_style_stats));
    Var<S> z = ad::add(post.mu,
                       ad::mul(ad::exp_v(ad::mul_scalar(post.logvar, S(0.5))), epsilon));
    DecodedStyle dec = vae_decode(bind, z);
    Var<S> mu_b = dec.mu, sd_b = dec.sigma;
    const Index bc = content_img.val().size(0);
    if (bc > 1) {
      mu_b = ad::repeat_rows(dec.mu, bc);
      sd_b = ad::repeat_rows(dec.sigma, bc);
    }
    Var<S> target = adain(tape, ct.b3, mu_b, sd_b, true);
    return decode(bind, target);
  }

  // No-grad style statistics of an image, for picking base styles.
  Tensor<S> image_style_stats(const Tensor<S>& img) {
    Tape<S> tape;
    Binding<S> bind(tape, false);
    EncoderTaps taps = encode(bind, tape.constant(img));
    return stats_vec(tape, taps.b3).val();
  }

  template <class F>
  void visit_params(F&& f) {
    e1_.visit(f, "style.e1");
    e2_.visit(f, "style.e2");
    e3_.visit(f, "style.e3");
    d1_.visit(f, "style.d1");
    d2_.visit(f, "style.d2");
    d3_.visit(f, "style.d3");
    d4_.visit(f, "style.d4");
    enc_fc_.visit(f, "style.vae.enc_fc");
    enc_mu_.visit(f, "style.vae.enc_mu");
    enc_logvar_.visit(f, "style.vae.enc_logvar");
    dec_fc_.visit(f, "style.vae.dec_fc");
    dec_out_.visit(f, "style.vae.dec_out");
  }

  std::vector<Tensor<S>*> param_ptrs() {
    std::vector<Tensor<S>*> out;
    visit_params([&](const std::string&, Tensor<S>& t) { out.push_back(&t); });
    return out;
  }

 private:
  Conv2d<S> e1_, e2_, e3_;
  Conv2d<S> d1_, d2_, d3_, d4_;
  Linear<S> enc_fc_, enc_mu_, enc_logvar_;
  Linear<S> dec_fc_, dec_out_;
};

// One ascent step on the task loss: epsilon moves along +grad so the next
// stylization is harder for the segmenter (set descent=true for the literal
// negative-direction reading). The result is clipped to ||eps|| <= 3*sqrt(Z).
template <class S>
Tensor<S> adversarial_epsilon_step(const Tensor<S>& epsilon,
                                   const Tensor<S>& seg_loss_grad, S eta,
                                   bool descent = false) {
  CCLSEG_REQUIRE(epsilon.same_shape(seg_loss_grad),
                 "adversarial_epsilon_step: shape mismatch");
  if (!seg_loss_grad.all_finite()) {
    warn("adversarial_epsilon_step: non-finite gradient, skipping update");
    return epsilon;
  }
  Tensor<S> out(epsilon.shape());
  const S sign = descent ? S(-1) : S(1);
  out.vec() = epsilon.vec() + sign * eta * seg_loss_grad.vec();
  const S limit = S(3) * std::sqrt(static_cast<S>(epsilon.numel()));
  const S norm = std::sqrt(out.vec().square().sum());
  if (norm > limit) out.vec() *= limit / norm;
  return out;
}

}  // namespace cclseg
