#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cclseg/autodiff.hpp"

namespace cclseg {

// Per-step binding of parameter tensors onto a tape. Binding the same tensor
// twice returns the existing var, so weight sharing across streams in one
// step accumulates gradients naturally.
template <class S>
class Binding {
 public:
  explicit Binding(Tape<S>& tape, bool trainable = true)
      : tape_(&tape), trainable_(trainable) {}

  Var<S> operator()(Tensor<S>& p) {
    for (const auto& e : entries_)
      if (e.first == &p) return e.second;
    Var<S> v = tape_->input(p, trainable_);
    entries_.emplace_back(&p, v);
    return v;
  }

  Var<S> lookup(const Tensor<S>& p) const {
    for (const auto& e : entries_)
      if (e.first == &p) return e.second;
    return Var<S>{};
  }

  const std::vector<std::pair<Tensor<S>*, Var<S>>>& entries() const {
    return entries_;
  }
  Tape<S>& tape() { return *tape_; }

 private:
  Tape<S>* tape_;
  bool trainable_;
  std::vector<std::pair<Tensor<S>*, Var<S>>> entries_;
};

// SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.
// Parameters that received no gradient this step are left untouched.
template <class S>
class Sgd {
 public:
  Sgd() = default;
  Sgd(std::vector<Tensor<S>*> params, S momentum)
      : params_(std::move(params)), momentum_(momentum) {
    for (Tensor<S>* p : params_) vel_.emplace_back(p->shape());
  }

  void step(Tape<S>& tape, const Binding<S>& binding, S lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Var<S> v = binding.lookup(*params_[i]);
      if (!v.ok()) continue;
      const Tensor<S>& g = tape.grad(v);
      vel_[i].vec() = momentum_ * vel_[i].vec() + g.vec();
      params_[i]->vec() -= lr * vel_[i].vec();
    }
  }

  std::vector<Tensor<S>>& velocities() { return vel_; }
  const std::vector<Tensor<S>*>& params() const { return params_; }

 private:
  std::vector<Tensor<S>*> params_;
  std::vector<Tensor<S>> vel_;
  S momentum_ = S(0.9);
};

// lr(t) = base * (1 - t/T)^power, the usual poly schedule.
template <class S>
S poly_lr(S base, long step, long total_steps, S power) {
  if (total_steps <= 0) return base;
  const S frac = std::min(S(1), static_cast<S>(step) / static_cast<S>(total_steps));
  return base * std::pow(S(1) - frac, power);
}

template <class S>
struct Conv2d {
  Tensor<S> w;  // [Cout, Cin, k, k]
  Tensor<S> b;  // [Cout]
  Index pad = 1;

  static Conv2d make(Index cin, Index cout, Index k, Index pad, Rng& rng) {
    Conv2d c;
    const S stddev = std::sqrt(S(2) / static_cast<S>(cin * k * k));
    c.w = Tensor<S>::randn({cout, cin, k, k}, rng, stddev);
    c.b = Tensor<S>({cout});
    c.pad = pad;
    return c;
  }

  Var<S> forward(Binding<S>& bind, Var<S> x) {
    return ad::conv2d(x, bind(w), bind(b), pad);
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

template <class S>
struct Linear {
  Tensor<S> w;  // [out, in]
  Tensor<S> b;  // [out]

  static Linear make(Index in, Index out, Rng& rng) {
    Linear l;
    l.w = Tensor<S>::randn({out, in}, rng, std::sqrt(S(2) / static_cast<S>(in)));
    l.b = Tensor<S>({out});
    return l;
  }

  // x [B, in] -> [B, out]
  Var<S> forward(Binding<S>& bind, Var<S> x) {
    return ad::add_rowvec(ad::matmul(x, ad::transpose2d(bind(w))), bind(b));
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

}  // namespace cclseg
