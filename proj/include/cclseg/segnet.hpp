#pragma once

#include "cclseg/nn.hpp"

// Desk-scale 3-level U-Net: encoder E, decoder D, and a 1x1-conv classifier
// head. The decoder feature map (final decoder activation, pre-classifier)
// is what the centroid machinery consumes.

namespace cclseg {

template <class S>
struct ConvBlock {
  Conv2d<S> c1, c2;

  static ConvBlock make(Index cin, Index cout, Rng& rng) {
    return ConvBlock{Conv2d<S>::make(cin, cout, 3, 1, rng),
                     Conv2d<S>::make(cout, cout, 3, 1, rng)};
  }
  Var<S> forward(Binding<S>& bind, Var<S> x) {
    return ad::silu(c2.forward(bind, ad::silu(c1.forward(bind, x))));
  }
  template <class F>
  void visit(F&& f, const std::string& p) {
    c1.visit(f, p + ".c1");
    c2.visit(f, p + ".c2");
  }
};

template <class S>
class SegNet {
 public:
  static constexpr Index kBaseWidth = 16;
  static constexpr Index kDecoderChannels = 32;

  SegNet() = default;
  SegNet(Index num_classes, Rng& rng)
      : k_(num_classes),
        enc1_(ConvBlock<S>::make(1, kBaseWidth, rng)),
        enc2_(ConvBlock<S>::make(kBaseWidth, 2 * kBaseWidth, rng)),
        bott_(ConvBlock<S>::make(2 * kBaseWidth, 4 * kBaseWidth, rng)),
        dec2_(ConvBlock<S>::make(4 * kBaseWidth + 2 * kBaseWidth, 2 * kBaseWidth, rng)),
        dec1_(ConvBlock<S>::make(2 * kBaseWidth + kBaseWidth, kDecoderChannels, rng)),
        cls_(Conv2d<S>::make(kDecoderChannels, num_classes, 1, 0, rng)) {}

  Index num_classes() const { return k_; }

  struct Out {
    Var<S> decoder_features;  // [B, 32, H, W]
    Var<S> logits;            // [B, K, H, W]
  };

  Out forward(Binding<S>& bind, Var<S> x) {
    const auto& sh = x.val().shape();
    CCLSEG_REQUIRE(sh.size() == 4 && sh[1] == 1,
                   "SegNet::forward: [B,1,H,W] input expected");
    CCLSEG_REQUIRE(sh[2] % 4 == 0 && sh[3] % 4 == 0,
                   "SegNet::forward: spatial dims must be divisible by 4");
    Var<S> e1 = enc1_.forward(bind, x);
    Var<S> e2 = enc2_.forward(bind, ad::avgpool2(e1));
    Var<S> bt = bott_.forward(bind, ad::avgpool2(e2));
    Var<S> d2 = dec2_.forward(bind, ad::concat_channels(ad::upsample2(bt), e2));
    Var<S> d1 = dec1_.forward(bind, ad::concat_channels(ad::upsample2(d2), e1));
    Var<S> logits = cls_.forward(bind, d1);
    return Out{d1, logits};
  }

  template <class F>
  void visit_params(F&& f) {
    enc1_.visit(f, "seg.enc1");
    enc2_.visit(f, "seg.enc2");
    bott_.visit(f, "seg.bott");
    dec2_.visit(f, "seg.dec2");
    dec1_.visit(f, "seg.dec1");
    cls_.visit(f, "seg.cls");
  }

  std::vector<Tensor<S>*> param_ptrs() {
    std::vector<Tensor<S>*> out;
    visit_params([&](const std::string&, Tensor<S>& t) { out.push_back(&t); });
    return out;
  }

 private:
  Index k_ = 0;
  ConvBlock<S> enc1_, enc2_, bott_, dec2_, dec1_;
  Conv2d<S> cls_;
};

// Cross-entropy (pixel mean) plus soft Jaccard with smoothing s=1, averaged
// over classes present in the labels.
template <class S>
Var<S> seg_loss(Tape<S>& tape, Var<S> logits, const Tensor<S>& onehot_labels) {
  const auto& ls = logits.val().shape();
  CCLSEG_REQUIRE(onehot_labels.shape() == ls, "seg_loss: label shape mismatch");
  const Index b = ls[0], hw = ls[2] * ls[3];

  Var<S> y = tape.constant(onehot_labels);
  Var<S> logp = ad::log_softmax_channels(logits);
  Var<S> ce = ad::mul_scalar(ad::sum_all(ad::mul(y, logp)),
                             S(-1) / static_cast<S>(b * hw));

  Var<S> p = ad::softmax_channels(logits);
  Var<S> inter = ad::sum_bhw_per_class(ad::mul(p, y));
  Var<S> psum = ad::sum_bhw_per_class(p);
  Var<S> ysum = ad::sum_bhw_per_class(y);

  const Index k = ls[1];
  Tensor<S> present({k});
  int count = 0;
  for (Index ki = 0; ki < k; ++ki) {
    double m = 0;
    for (Index bi = 0; bi < b; ++bi) {
      typename Tensor<S>::ConstVecMap v(onehot_labels.data() + (bi * k + ki) * hw, hw);
      m += static_cast<double>(v.sum());
    }
    present[ki] = m > 0 ? S(1) : S(0);
    if (m > 0) ++count;
  }
  CCLSEG_REQUIRE(count > 0, "seg_loss: empty labels");

  const S smooth = S(1);
  Var<S> num = ad::add_scalar(inter, smooth);
  Var<S> den = ad::add_scalar(ad::sub(ad::add(psum, ysum), inter), smooth);
  Var<S> jac = ad::add_scalar(ad::mul_scalar(ad::div(num, den), S(-1)), S(1));
  Var<S> jac_present = ad::mul(jac, tape.constant(present));
  Var<S> jac_mean =
      ad::mul_scalar(ad::sum_all(jac_present), S(1) / static_cast<S>(count));

  return ad::add(ce, jac_mean);
}

}  // namespace cclseg
