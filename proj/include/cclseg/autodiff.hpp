#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include "cclseg/tensor.hpp"

// Eager reverse-mode tape over Tensor<S>. Each op computes its value
// immediately and records a pullback closure; backward() walks the tape in
// reverse creation order. Only the ops the losses in this project need —
// no graph rewriting, no broadcasting beyond the few shaped ops below.

namespace cclseg {

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int idx = -1;
  bool ok() const { return tape != nullptr && idx >= 0; }
  const Tensor<S>& val() const;
  S item() const;
};

template <class S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool grad_set = false;
    bool needs = false;
    BackFn back;
  };

  Var<S> input(Tensor<S> v, bool requires_grad) {
    nodes_.push_back(Node{std::move(v), {}, false, requires_grad, {}});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }
  Var<S> constant(Tensor<S> v) { return input(std::move(v), false); }
  Var<S> scalar(S v) { return constant(Tensor<S>::scalar(v)); }

  Var<S> make(Tensor<S> v, std::initializer_list<Var<S>> parents, BackFn back) {
    bool req = false;
    for (const Var<S>& p : parents) {
      CCLSEG_REQUIRE(p.tape == this, "Tape::make: mixed tapes");
      req = req || nodes_[static_cast<size_t>(p.idx)].needs;
    }
    nodes_.push_back(Node{std::move(v), {}, false, req, req ? std::move(back) : BackFn{}});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<S>& value(int i) const { return nodes_[static_cast<size_t>(i)].value; }
  bool needs_grad(int i) const { return nodes_[static_cast<size_t>(i)].needs; }

  // Gradient buffer, allocated to zeros on first touch.
  Tensor<S>& grad_buf(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.grad_set) {
      n.grad = Tensor<S>(n.value.shape());
      n.grad_set = true;
    }
    return n.grad;
  }

  const Tensor<S>& grad(Var<S> v) {
    CCLSEG_REQUIRE(v.tape == this, "Tape::grad: foreign var");
    return grad_buf(v.idx);
  }

  void backward(Var<S> out) {
    CCLSEG_REQUIRE(out.tape == this, "Tape::backward: foreign var");
    CCLSEG_REQUIRE(value(out.idx).numel() == 1,
                   "Tape::backward: output must be scalar");
    grad_buf(out.idx)[0] = S(1);
    for (int i = out.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad_set && n.back) n.back(*this, i);
    }
  }

  void clear() { nodes_.clear(); }
  size_t num_nodes() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

template <class S>
inline const Tensor<S>& Var<S>::val() const {
  return tape->value(idx);
}
template <class S>
inline S Var<S>::item() const {
  CCLSEG_REQUIRE(val().numel() == 1, "Var::item: not a scalar");
  return val()[0];
}

namespace ad {

template <class S>
inline void check_same(const Var<S>& a, const Var<S>& b) {
  CCLSEG_REQUIRE(a.tape == b.tape, "op: vars from different tapes");
  CCLSEG_REQUIRE(a.val().same_shape(b.val()), "op: shape mismatch " +
                     shape_str(a.val()) + " vs " + shape_str(b.val()));
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  check_same(a, b);
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec() + b.val().vec();
  const int ai = a.idx, bi = b.idx;
  return a.tape->make(std::move(out), {a, b}, [ai, bi](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += g.vec();
    if (t.needs_grad(bi)) t.grad_buf(bi).vec() += g.vec();
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  check_same(a, b);
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec() - b.val().vec();
  const int ai = a.idx, bi = b.idx;
  return a.tape->make(std::move(out), {a, b}, [ai, bi](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += g.vec();
    if (t.needs_grad(bi)) t.grad_buf(bi).vec() -= g.vec();
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  check_same(a, b);
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec() * b.val().vec();
  const int ai = a.idx, bi = b.idx;
  return a.tape->make(std::move(out), {a, b}, [ai, bi](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += g.vec() * t.value(bi).vec();
    if (t.needs_grad(bi)) t.grad_buf(bi).vec() += g.vec() * t.value(ai).vec();
  });
}

template <class S>
Var<S> div(Var<S> a, Var<S> b) {
  check_same(a, b);
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec() / b.val().vec();
  const int ai = a.idx, bi = b.idx;
  return a.tape->make(std::move(out), {a, b}, [ai, bi](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& bv = t.value(bi).vec();
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += g.vec() / bv;
    if (t.needs_grad(bi))
      t.grad_buf(bi).vec() -= g.vec() * t.value(ai).vec() / (bv * bv);
  });
}

template <class S>
Var<S> mul_scalar(Var<S> a, S c) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec() * c;
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, c](Tape<S>& t, int self) {
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += t.grad_buf(self).vec() * c;
  });
}

template <class S>
Var<S> add_scalar(Var<S> a, S c) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec() + c;
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += t.grad_buf(self).vec();
  });
}

template <class S>
Var<S> neg(Var<S> a) {
  return mul_scalar(a, S(-1));
}

template <class S>
Var<S> exp_v(Var<S> a) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec().exp();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai))
      t.grad_buf(ai).vec() += t.grad_buf(self).vec() * t.value(self).vec();
  });
}

template <class S>
Var<S> log_v(Var<S> a) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec().log();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai))
      t.grad_buf(ai).vec() += t.grad_buf(self).vec() / t.value(ai).vec();
  });
}

template <class S>
Var<S> square(Var<S> a) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec().square();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai))
      t.grad_buf(ai).vec() +=
          S(2) * t.grad_buf(self).vec() * t.value(ai).vec();
  });
}

template <class S>
Var<S> clamp_min(Var<S> a, S floor) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec().max(floor);
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, floor](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.value(ai);
    auto gx = t.grad_buf(ai).vec();
    for (Index i = 0; i < x.numel(); ++i)
      if (x[i] > floor) gx[i] += g[i];
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  return clamp_min(a, S(0));
}

template <class S>
Var<S> lrelu(Var<S> a, S slope) {
  Tensor<S> out(a.val().shape());
  const auto& x = a.val();
  for (Index i = 0; i < x.numel(); ++i)
    out[i] = x[i] > S(0) ? x[i] : slope * x[i];
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, slope](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.value(ai);
    auto gx = t.grad_buf(ai).vec();
    for (Index i = 0; i < x.numel(); ++i)
      gx[i] += x[i] > S(0) ? g[i] : slope * g[i];
  });
}

template <class S>
Var<S> sigmoid_v(Var<S> a) {
  Tensor<S> out(a.val().shape());
  const auto& x = a.val();
  for (Index i = 0; i < x.numel(); ++i) {
    const S v = x[i];
    out[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                       : std::exp(v) / (S(1) + std::exp(v));
  }
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    const auto& s = t.value(self);
    auto gx = t.grad_buf(ai).vec();
    gx += g.vec() * s.vec() * (S(1) - s.vec());
  });
}

// x * sigmoid(x); smooth everywhere, which keeps finite-difference gradient
// checks clean where relu kinks would inject O(h) noise.
template <class S>
Var<S> silu(Var<S> a) {
  Tensor<S> out(a.val().shape());
  const auto& x = a.val();
  for (Index i = 0; i < x.numel(); ++i) {
    const S v = x[i];
    const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                            : std::exp(v) / (S(1) + std::exp(v));
    out[i] = v * sig;
  }
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.value(ai);
    auto gx = t.grad_buf(ai).vec();
    for (Index i = 0; i < x.numel(); ++i) {
      const S v = x[i];
      const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : std::exp(v) / (S(1) + std::exp(v));
      gx[i] += g[i] * (sig + v * sig * (S(1) - sig));
    }
  });
}

template <class S>
Var<S> softplus_v(Var<S> a) {
  Tensor<S> out(a.val().shape());
  const auto& x = a.val();
  for (Index i = 0; i < x.numel(); ++i) {
    const S v = x[i];
    out[i] = v > S(30) ? v : std::log1p(std::exp(v));
  }
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.value(ai);
    auto gx = t.grad_buf(ai).vec();
    for (Index i = 0; i < x.numel(); ++i) {
      const S v = x[i];
      const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : std::exp(v) / (S(1) + std::exp(v));
      gx[i] += g[i] * sig;
    }
  });
}

template <class S>
Var<S> sum_all(Var<S> a) {
  Tensor<S> out = Tensor<S>::scalar(a.val().vec().sum());
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += t.grad_buf(self)[0];
  });
}

template <class S>
Var<S> mean_all(Var<S> a) {
  const S inv = S(1) / static_cast<S>(a.val().numel());
  return mul_scalar(sum_all(a), inv);
}

// [m,n] -> [m], sum over columns of each row
template <class S>
Var<S> row_sums(Var<S> a) {
  CCLSEG_REQUIRE(a.val().rank() == 2, "row_sums: rank-2 expected");
  const Index m = a.val().size(0), n = a.val().size(1);
  Tensor<S> out({m});
  out.vec() = a.val().mat2().rowwise().sum().array();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, m, n](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    auto gx = t.grad_buf(ai).mat(m, n);
    for (Index i = 0; i < m; ++i) gx.row(i).array() += g[i];
  });
}

// [m,n] -> [n]
template <class S>
Var<S> col_sums(Var<S> a) {
  CCLSEG_REQUIRE(a.val().rank() == 2, "col_sums: rank-2 expected");
  const Index m = a.val().size(0), n = a.val().size(1);
  Tensor<S> out({n});
  out.vec() = a.val().mat2().colwise().sum().array();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, m, n](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    auto gx = t.grad_buf(ai).mat(m, n);
    for (Index j = 0; j < n; ++j) gx.col(j).array() += g[j];
  });
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  CCLSEG_REQUIRE(a.val().rank() == 2 && b.val().rank() == 2,
                 "matmul: rank-2 expected");
  const Index m = a.val().size(0), k = a.val().size(1), n = b.val().size(1);
  CCLSEG_REQUIRE(b.val().size(0) == k, "matmul: inner dim mismatch");
  Tensor<S> out({m, n});
  out.mat2().noalias() = a.val().mat2() * b.val().mat2();
  const int ai = a.idx, bi = b.idx;
  return a.tape->make(std::move(out), {a, b}, [ai, bi](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    const Index m = g.size(0), n = g.size(1);
    if (t.needs_grad(ai))
      t.grad_buf(ai).mat2().noalias() += g.mat(m, n) * t.value(bi).mat2().transpose();
    if (t.needs_grad(bi))
      t.grad_buf(bi).mat2().noalias() += t.value(ai).mat2().transpose() * g.mat(m, n);
  });
}

template <class S>
Var<S> transpose2d(Var<S> a) {
  CCLSEG_REQUIRE(a.val().rank() == 2, "transpose2d: rank-2 expected");
  const Index m = a.val().size(0), n = a.val().size(1);
  Tensor<S> out({n, m});
  out.mat2() = a.val().mat2().transpose();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai))
      t.grad_buf(ai).mat2() += t.grad_buf(self).mat2().transpose();
  });
}

template <class S>
Var<S> reshape(Var<S> a, std::vector<Index> shape) {
  Tensor<S> out = a.val().reshaped(std::move(shape));
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += t.grad_buf(self).vec();
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Index c0, Index c1) {
  CCLSEG_REQUIRE(a.val().rank() == 2, "slice_cols: rank-2 expected");
  const Index m = a.val().size(0), n = a.val().size(1);
  CCLSEG_REQUIRE(0 <= c0 && c0 < c1 && c1 <= n, "slice_cols: bad range");
  Tensor<S> out({m, c1 - c0});
  out.mat2() = a.val().mat2().middleCols(c0, c1 - c0);
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, c0, c1, m, n](Tape<S>& t, int self) {
    if (t.needs_grad(ai))
      t.grad_buf(ai).mat(m, n).middleCols(c0, c1 - c0) +=
          t.grad_buf(self).mat(m, c1 - c0);
  });
}

template <class S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  CCLSEG_REQUIRE(a.val().rank() == 2 && b.val().rank() == 2,
                 "concat_cols: rank-2 expected");
  const Index m = a.val().size(0), n1 = a.val().size(1), n2 = b.val().size(1);
  CCLSEG_REQUIRE(b.val().size(0) == m, "concat_cols: row mismatch");
  Tensor<S> out({m, n1 + n2});
  out.mat2().leftCols(n1) = a.val().mat2();
  out.mat2().rightCols(n2) = b.val().mat2();
  const int ai = a.idx, bi = b.idx;
  return a.tape->make(std::move(out), {a, b},
                      [ai, bi, m, n1, n2](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.needs_grad(ai)) t.grad_buf(ai).mat(m, n1) += g.mat(m, n1 + n2).leftCols(n1);
    if (t.needs_grad(bi)) t.grad_buf(bi).mat(m, n2) += g.mat(m, n1 + n2).rightCols(n2);
  });
}

template <class S>
Var<S> repeat_rows(Var<S> a, Index reps) {
  CCLSEG_REQUIRE(a.val().rank() == 2 && a.val().size(0) == 1,
                 "repeat_rows: [1,n] expected");
  const Index n = a.val().size(1);
  Tensor<S> out({reps, n});
  for (Index r = 0; r < reps; ++r)
    out.mat2().row(r) = a.val().mat2().row(0);
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, reps, n](Tape<S>& t, int self) {
    if (t.needs_grad(ai))
      t.grad_buf(ai).mat(1, n) += t.grad_buf(self).mat(reps, n).colwise().sum();
  });
}

template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> v) {
  CCLSEG_REQUIRE(a.val().rank() == 2 && v.val().rank() == 1 &&
                     a.val().size(1) == v.val().size(0),
                 "add_rowvec: shape mismatch");
  const Index m = a.val().size(0), n = a.val().size(1);
  Tensor<S> out({m, n});
  out.mat2() = a.val().mat2();
  out.mat2().rowwise() += v.val().mat(1, n).row(0);
  const int ai = a.idx, vi = v.idx;
  return a.tape->make(std::move(out), {a, v}, [ai, vi, m, n](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.needs_grad(ai)) t.grad_buf(ai).vec() += g.vec();
    if (t.needs_grad(vi))
      t.grad_buf(vi).mat(1, n) += g.mat(m, n).colwise().sum();
  });
}

template <class S>
Var<S> diag2d(Var<S> a) {
  CCLSEG_REQUIRE(a.val().rank() == 2 && a.val().size(0) == a.val().size(1),
                 "diag2d: square rank-2 expected");
  const Index k = a.val().size(0);
  Tensor<S> out({k});
  for (Index i = 0; i < k; ++i) out[i] = a.val().at2(i, i);
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, k](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    auto& gx = t.grad_buf(ai);
    for (Index i = 0; i < k; ++i) gx.at2(i, i) += g[i];
  });
}

// Row L2 norms with a floor: n_k = sqrt(max(sum_c a_kc^2, eps^2)).
template <class S>
Var<S> rows_l2norm(Var<S> a, S eps) {
  CCLSEG_REQUIRE(a.val().rank() == 2, "rows_l2norm: rank-2 expected");
  const Index k = a.val().size(0), c = a.val().size(1);
  Tensor<S> out({k});
  for (Index i = 0; i < k; ++i) {
    const S sq = a.val().mat2().row(i).squaredNorm();
    out[i] = std::sqrt(std::max(sq, eps * eps));
  }
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai, k, c, eps](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.value(ai);
    auto gx = t.grad_buf(ai).mat(k, c);
    for (Index i = 0; i < k; ++i) {
      const S sq = x.mat(k, c).row(i).squaredNorm();
      if (sq <= eps * eps) continue;  // floored: flat
      gx.row(i) += (g[i] / std::sqrt(sq)) * x.mat(k, c).row(i);
    }
  });
}

// out[k,:] = a[k,:] * s[k]
template <class S>
Var<S> rowwise_scale(Var<S> a, Var<S> s) {
  CCLSEG_REQUIRE(a.val().rank() == 2 && s.val().rank() == 1 &&
                     a.val().size(0) == s.val().size(0),
                 "rowwise_scale: shape mismatch");
  const Index k = a.val().size(0), c = a.val().size(1);
  Tensor<S> out({k, c});
  for (Index i = 0; i < k; ++i)
    out.mat2().row(i) = a.val().mat2().row(i) * s.val()[i];
  const int ai = a.idx, si = s.idx;
  return a.tape->make(std::move(out), {a, s}, [ai, si, k, c](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.needs_grad(ai)) {
      auto gx = t.grad_buf(ai).mat(k, c);
      for (Index i = 0; i < k; ++i)
        gx.row(i) += g.mat(k, c).row(i) * t.value(si)[i];
    }
    if (t.needs_grad(si)) {
      auto& gs = t.grad_buf(si);
      for (Index i = 0; i < k; ++i)
        gs[i] += (g.mat(k, c).row(i).array() * t.value(ai).mat(k, c).row(i).array()).sum();
    }
  });
}

template <class S>
Var<S> recip(Var<S> a) {
  Tensor<S> out(a.val().shape());
  out.vec() = a.val().vec().inverse();
  const int ai = a.idx;
  return a.tape->make(std::move(out), {a}, [ai](Tape<S>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const auto& y = t.value(self);
    t.grad_buf(ai).vec() -= t.grad_buf(self).vec() * y.vec() * y.vec();
  });
}

template <class S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.val());
}

// ------------------------------ NCHW ops ------------------------------

namespace detail {

template <class S>
void im2col(const Tensor<S>& x, Index b, Index k, Index pad, Index ho,
            Index wo, Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>& col) {
  const Index cin = x.size(1), h = x.size(2), w = x.size(3);
  col.setZero(cin * k * k, ho * wo);
  for (Index c = 0; c < cin; ++c) {
    for (Index di = 0; di < k; ++di) {
      for (Index dj = 0; dj < k; ++dj) {
        const Index row = (c * k + di) * k + dj;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh + di - pad;
          if (ih < 0 || ih >= h) continue;
          const S* src = x.data() + ((b * cin + c) * h + ih) * w;
          S* dst = col.data() + row * (ho * wo) + oh * wo;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow + dj - pad;
            if (iw >= 0 && iw < w) dst[ow] = src[iw];
          }
        }
      }
    }
  }
}

template <class S>
void col2im_accum(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic,
                                      Eigen::RowMajor>& col,
                  Tensor<S>& gx, Index b, Index k, Index pad, Index ho,
                  Index wo) {
  const Index cin = gx.size(1), h = gx.size(2), w = gx.size(3);
  for (Index c = 0; c < cin; ++c) {
    for (Index di = 0; di < k; ++di) {
      for (Index dj = 0; dj < k; ++dj) {
        const Index row = (c * k + di) * k + dj;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh + di - pad;
          if (ih < 0 || ih >= h) continue;
          S* dst = gx.data() + ((b * cin + c) * h + ih) * w;
          const S* src = col.data() + row * (ho * wo) + oh * wo;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow + dj - pad;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Stride-1 2-D convolution, square kernel, zero padding.
// x [B,Cin,H,W], w [Cout,Cin,k,k], bias [Cout] -> [B,Cout,Ho,Wo]
template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> bias, Index pad) {
  const auto& xs = x.val().shape();
  const auto& ws = w.val().shape();
  CCLSEG_REQUIRE(xs.size() == 4 && ws.size() == 4, "conv2d: rank-4 expected");
  const Index b = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const Index cout = ws[0], k = ws[2];
  CCLSEG_REQUIRE(ws[1] == cin && ws[3] == k, "conv2d: kernel shape mismatch");
  CCLSEG_REQUIRE(bias.val().numel() == cout, "conv2d: bias size mismatch");
  const Index ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  CCLSEG_REQUIRE(ho > 0 && wo > 0, "conv2d: output collapses");

  Tensor<S> out({b, cout, ho, wo});
  {
    const Tensor<S>& xv = x.val();
    const Tensor<S>& wv = w.val();
    const Tensor<S>& bv = bias.val();
    parallel_for(b, [&](Index bi) {
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> col;
      detail::im2col(xv, bi, k, pad, ho, wo, col);
      typename Tensor<S>::MatMap om(out.data() + bi * cout * ho * wo, cout, ho * wo);
      om.noalias() = wv.mat(cout, cin * k * k) * col;
      for (Index c = 0; c < cout; ++c) om.row(c).array() += bv[c];
    });
  }

  const int xi = x.idx, wi = w.idx, bi_ = bias.idx;
  return x.tape->make(std::move(out), {x, w, bias},
                      [xi, wi, bi_, b, cin, cout, k, pad, ho, wo](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    const bool need_x = t.needs_grad(xi), need_w = t.needs_grad(wi),
               need_b = t.needs_grad(bi_);
    // per-item partials computed in parallel, then reduced in item order so
    // the result does not depend on thread count
    std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        dw_parts(need_w ? static_cast<size_t>(b) : 0);
    std::vector<Eigen::Array<S, Eigen::Dynamic, 1>> db_parts(
        need_b ? static_cast<size_t>(b) : 0);
    const Tensor<S>& wv = t.value(wi);
    const Tensor<S>& xv = t.value(xi);
    Tensor<S>* gx = need_x ? &t.grad_buf(xi) : nullptr;
    parallel_for(b, [&](Index bb) {
      typename Tensor<S>::ConstMatMap gm(g.data() + bb * cout * ho * wo, cout,
                                         ho * wo);
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> col, gcol;
      if (need_w) {
        detail::im2col(xv, bb, k, pad, ho, wo, col);
        dw_parts[static_cast<size_t>(bb)].noalias() = gm * col.transpose();
      }
      if (need_x) {
        gcol.noalias() = wv.mat(cout, cin * k * k).transpose() * gm;
        detail::col2im_accum(gcol, *gx, bb, k, pad, ho, wo);
      }
      if (need_b) {
        auto& db = db_parts[static_cast<size_t>(bb)];
        db.setZero(cout);
        for (Index c = 0; c < cout; ++c) db[c] = gm.row(c).sum();
      }
    });
    if (need_w) {
      auto gw = t.grad_buf(wi).mat(cout, cin * k * k);
      for (Index bb = 0; bb < b; ++bb) gw.noalias() += dw_parts[static_cast<size_t>(bb)];
    }
    if (need_b) {
      auto& gb = t.grad_buf(bi_);
      for (Index bb = 0; bb < b; ++bb) gb.vec() += db_parts[static_cast<size_t>(bb)];
    }
  });
}

// 2x2 average pooling, stride 2. H and W must be even.
template <class S>
Var<S> avgpool2(Var<S> x) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
                 "avgpool2: [B,C,even,even] expected");
  const Index b = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<S> out({b, c, h / 2, w / 2});
  for (Index bc = 0; bc < b * c; ++bc) {
    const S* src = x.val().data() + bc * h * w;
    S* dst = out.data() + bc * (h / 2) * (w / 2);
    for (Index i = 0; i < h / 2; ++i)
      for (Index j = 0; j < w / 2; ++j)
        dst[i * (w / 2) + j] =
            S(0.25) * (src[(2 * i) * w + 2 * j] + src[(2 * i) * w + 2 * j + 1] +
                       src[(2 * i + 1) * w + 2 * j] +
                       src[(2 * i + 1) * w + 2 * j + 1]);
  }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x}, [xi, b, c, h, w](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    auto& gx = t.grad_buf(xi);
    for (Index bc = 0; bc < b * c; ++bc) {
      const S* gs = g.data() + bc * (h / 2) * (w / 2);
      S* gd = gx.data() + bc * h * w;
      for (Index i = 0; i < h / 2; ++i)
        for (Index j = 0; j < w / 2; ++j) {
          const S v = S(0.25) * gs[i * (w / 2) + j];
          gd[(2 * i) * w + 2 * j] += v;
          gd[(2 * i) * w + 2 * j + 1] += v;
          gd[(2 * i + 1) * w + 2 * j] += v;
          gd[(2 * i + 1) * w + 2 * j + 1] += v;
        }
    }
  });
}

// Nearest-neighbor 2x upsampling.
template <class S>
Var<S> upsample2(Var<S> x) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "upsample2: rank-4 expected");
  const Index b = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<S> out({b, c, 2 * h, 2 * w});
  for (Index bc = 0; bc < b * c; ++bc) {
    const S* src = x.val().data() + bc * h * w;
    S* dst = out.data() + bc * 4 * h * w;
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const S v = src[i * w + j];
        dst[(2 * i) * 2 * w + 2 * j] = v;
        dst[(2 * i) * 2 * w + 2 * j + 1] = v;
        dst[(2 * i + 1) * 2 * w + 2 * j] = v;
        dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
      }
  }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x}, [xi, b, c, h, w](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    auto& gx = t.grad_buf(xi);
    for (Index bc = 0; bc < b * c; ++bc) {
      const S* gs = g.data() + bc * 4 * h * w;
      S* gd = gx.data() + bc * h * w;
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j)
          gd[i * w + j] += gs[(2 * i) * 2 * w + 2 * j] +
                           gs[(2 * i) * 2 * w + 2 * j + 1] +
                           gs[(2 * i + 1) * 2 * w + 2 * j] +
                           gs[(2 * i + 1) * 2 * w + 2 * j + 1];
    }
  });
}

template <class S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  const auto& sa = a.val().shape();
  const auto& sb = b.val().shape();
  CCLSEG_REQUIRE(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] &&
                     sa[2] == sb[2] && sa[3] == sb[3],
                 "concat_channels: shape mismatch");
  const Index bn = sa[0], c1 = sa[1], c2 = sb[1], hw = sa[2] * sa[3];
  Tensor<S> out({bn, c1 + c2, sa[2], sa[3]});
  for (Index bi = 0; bi < bn; ++bi) {
    std::copy(a.val().data() + bi * c1 * hw, a.val().data() + (bi + 1) * c1 * hw,
              out.data() + bi * (c1 + c2) * hw);
    std::copy(b.val().data() + bi * c2 * hw, b.val().data() + (bi + 1) * c2 * hw,
              out.data() + bi * (c1 + c2) * hw + c1 * hw);
  }
  const int ai = a.idx, bidx = b.idx;
  return a.tape->make(std::move(out), {a, b},
                      [ai, bidx, bn, c1, c2, hw](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    for (Index bi = 0; bi < bn; ++bi) {
      const S* gsrc = g.data() + bi * (c1 + c2) * hw;
      if (t.needs_grad(ai)) {
        S* gd = t.grad_buf(ai).data() + bi * c1 * hw;
        for (Index i = 0; i < c1 * hw; ++i) gd[i] += gsrc[i];
      }
      if (t.needs_grad(bidx)) {
        S* gd = t.grad_buf(bidx).data() + bi * c2 * hw;
        for (Index i = 0; i < c2 * hw; ++i) gd[i] += gsrc[c1 * hw + i];
      }
    }
  });
}

// Per-pixel softmax over the channel axis of [B,K,H,W].
template <class S>
Var<S> softmax_channels(Var<S> x) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "softmax_channels: rank-4 expected");
  const Index b = s[0], kk = s[1], hw = s[2] * s[3];
  Tensor<S> out(s);
  for (Index bi = 0; bi < b; ++bi) {
    const S* xin = x.val().data() + bi * kk * hw;
    S* o = out.data() + bi * kk * hw;
    for (Index p = 0; p < hw; ++p) {
      S mx = xin[p];
      for (Index k = 1; k < kk; ++k) mx = std::max(mx, xin[k * hw + p]);
      S z = S(0);
      for (Index k = 0; k < kk; ++k) {
        const S e = std::exp(xin[k * hw + p] - mx);
        o[k * hw + p] = e;
        z += e;
      }
      const S inv = S(1) / z;
      for (Index k = 0; k < kk; ++k) o[k * hw + p] *= inv;
    }
  }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x}, [xi, b, kk, hw](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    const auto& p = t.value(self);
    auto& gx = t.grad_buf(xi);
    for (Index bi = 0; bi < b; ++bi) {
      const S* gp = g.data() + bi * kk * hw;
      const S* pp = p.data() + bi * kk * hw;
      S* gxp = gx.data() + bi * kk * hw;
      for (Index px = 0; px < hw; ++px) {
        S dot = S(0);
        for (Index k = 0; k < kk; ++k) dot += gp[k * hw + px] * pp[k * hw + px];
        for (Index k = 0; k < kk; ++k)
          gxp[k * hw + px] += pp[k * hw + px] * (gp[k * hw + px] - dot);
      }
    }
  });
}

template <class S>
Var<S> log_softmax_channels(Var<S> x) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "log_softmax_channels: rank-4 expected");
  const Index b = s[0], kk = s[1], hw = s[2] * s[3];
  Tensor<S> out(s);
  for (Index bi = 0; bi < b; ++bi) {
    const S* xin = x.val().data() + bi * kk * hw;
    S* o = out.data() + bi * kk * hw;
    for (Index p = 0; p < hw; ++p) {
      S mx = xin[p];
      for (Index k = 1; k < kk; ++k) mx = std::max(mx, xin[k * hw + p]);
      S z = S(0);
      for (Index k = 0; k < kk; ++k) z += std::exp(xin[k * hw + p] - mx);
      const S lse = mx + std::log(z);
      for (Index k = 0; k < kk; ++k) o[k * hw + p] = xin[k * hw + p] - lse;
    }
  }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x}, [xi, b, kk, hw](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    const auto& lo = t.value(self);
    auto& gx = t.grad_buf(xi);
    for (Index bi = 0; bi < b; ++bi) {
      const S* gp = g.data() + bi * kk * hw;
      const S* lp = lo.data() + bi * kk * hw;
      S* gxp = gx.data() + bi * kk * hw;
      for (Index px = 0; px < hw; ++px) {
        S gsum = S(0);
        for (Index k = 0; k < kk; ++k) gsum += gp[k * hw + px];
        for (Index k = 0; k < kk; ++k)
          gxp[k * hw + px] += gp[k * hw + px] - std::exp(lp[k * hw + px]) * gsum;
      }
    }
  });
}

// Per-instance per-channel mean over spatial dims: [B,C,H,W] -> [B,C]
template <class S>
Var<S> inst_mean(Var<S> x) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "inst_mean: rank-4 expected");
  const Index b = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<S> out({b, c});
  for (Index bc = 0; bc < b * c; ++bc) {
    typename Tensor<S>::ConstVecMap v(x.val().data() + bc * hw, hw);
    out[bc] = v.sum() / static_cast<S>(hw);
  }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x}, [xi, b, c, hw](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    auto& gx = t.grad_buf(xi);
    const S inv = S(1) / static_cast<S>(hw);
    for (Index bc = 0; bc < b * c; ++bc) {
      typename Tensor<S>::VecMap v(gx.data() + bc * hw, hw);
      v += g[bc] * inv;
    }
  });
}

// Per-instance per-channel std with variance floored at eps_std^2 (flat
// gradient when floored). Population variance.
template <class S>
Var<S> inst_std(Var<S> x, S eps_std) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "inst_std: rank-4 expected");
  const Index b = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<S> out({b, c});
  for (Index bc = 0; bc < b * c; ++bc) {
    typename Tensor<S>::ConstVecMap v(x.val().data() + bc * hw, hw);
    const S mu = v.sum() / static_cast<S>(hw);
    const S var = (v - mu).square().sum() / static_cast<S>(hw);
    out[bc] = std::sqrt(std::max(var, eps_std * eps_std));
  }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x},
                      [xi, b, c, hw, eps_std](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    const auto& xv = t.value(xi);
    const auto& sd = t.value(self);
    auto& gx = t.grad_buf(xi);
    for (Index bc = 0; bc < b * c; ++bc) {
      typename Tensor<S>::ConstVecMap v(xv.data() + bc * hw, hw);
      const S mu = v.sum() / static_cast<S>(hw);
      const S var = (v - mu).square().sum() / static_cast<S>(hw);
      if (var <= eps_std * eps_std) continue;
      typename Tensor<S>::VecMap gv(gx.data() + bc * hw, hw);
      gv += (g[bc] / (static_cast<S>(hw) * sd[bc])) * (v - mu);
    }
  });
}

// out[b,c,:,:] = x[b,c,:,:] * scale[b,c] + shift[b,c]
template <class S>
Var<S> channel_affine(Var<S> x, Var<S> scale, Var<S> shift) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "channel_affine: rank-4 expected");
  const Index b = s[0], c = s[1], hw = s[2] * s[3];
  CCLSEG_REQUIRE(scale.val().rank() == 2 && scale.val().size(0) == b &&
                     scale.val().size(1) == c && shift.val().same_shape(scale.val()),
                 "channel_affine: stats shape mismatch");
  Tensor<S> out(s);
  for (Index bc = 0; bc < b * c; ++bc) {
    typename Tensor<S>::ConstVecMap v(x.val().data() + bc * hw, hw);
    typename Tensor<S>::VecMap o(out.data() + bc * hw, hw);
    o = v * scale.val()[bc] + shift.val()[bc];
  }
  const int xi = x.idx, sci = scale.idx, shi = shift.idx;
  return x.tape->make(std::move(out), {x, scale, shift},
                      [xi, sci, shi, b, c, hw](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);
    for (Index bc = 0; bc < b * c; ++bc) {
      typename Tensor<S>::ConstVecMap gv(g.data() + bc * hw, hw);
      if (t.needs_grad(xi)) {
        typename Tensor<S>::VecMap gx(t.grad_buf(xi).data() + bc * hw, hw);
        gx += gv * t.value(sci)[bc];
      }
      if (t.needs_grad(sci)) {
        typename Tensor<S>::ConstVecMap xv(t.value(xi).data() + bc * hw, hw);
        t.grad_buf(sci)[bc] += (gv * xv).sum();
      }
      if (t.needs_grad(shi)) t.grad_buf(shi)[bc] += gv.sum();
    }
  });
}

// Mask-weighted feature sums: out[k,c] = sum_{b,h,w} mask[b,k,h,w] * feat[b,c,h,w]
template <class S>
Var<S> centroid_weighted_sum(Var<S> feat, Var<S> mask) {
  const auto& fs = feat.val().shape();
  const auto& ms = mask.val().shape();
  CCLSEG_REQUIRE(fs.size() == 4 && ms.size() == 4 && fs[0] == ms[0] &&
                     fs[2] == ms[2] && fs[3] == ms[3],
                 "centroid_weighted_sum: shape mismatch");
  const Index b = fs[0], c = fs[1], k = ms[1], hw = fs[2] * fs[3];
  Tensor<S> out({k, c});
  out.mat2().setZero();
  for (Index bi = 0; bi < b; ++bi) {
    typename Tensor<S>::ConstMatMap m(mask.val().data() + bi * k * hw, k, hw);
    typename Tensor<S>::ConstMatMap f(feat.val().data() + bi * c * hw, c, hw);
    out.mat2().noalias() += m * f.transpose();
  }
  const int fi = feat.idx, mi = mask.idx;
  return feat.tape->make(std::move(out), {feat, mask},
                         [fi, mi, b, c, k, hw](Tape<S>& t, int self) {
    const auto& g = t.grad_buf(self);  // [k,c]
    for (Index bi = 0; bi < b; ++bi) {
      if (t.needs_grad(fi)) {
        typename Tensor<S>::ConstMatMap m(t.value(mi).data() + bi * k * hw, k, hw);
        typename Tensor<S>::MatMap gf(t.grad_buf(fi).data() + bi * c * hw, c, hw);
        gf.noalias() += g.mat(k, c).transpose() * m;
      }
      if (t.needs_grad(mi)) {
        typename Tensor<S>::ConstMatMap f(t.value(fi).data() + bi * c * hw, c, hw);
        typename Tensor<S>::MatMap gm(t.grad_buf(mi).data() + bi * k * hw, k, hw);
        gm.noalias() += g.mat(k, c) * f;
      }
    }
  });
}

// out[k] = sum_{b,h,w} x[b,k,h,w]
template <class S>
Var<S> sum_bhw_per_class(Var<S> x) {
  const auto& s = x.val().shape();
  CCLSEG_REQUIRE(s.size() == 4, "sum_bhw_per_class: rank-4 expected");
  const Index b = s[0], k = s[1], hw = s[2] * s[3];
  Tensor<S> out({k});
  for (Index bi = 0; bi < b; ++bi)
    for (Index ki = 0; ki < k; ++ki) {
      typename Tensor<S>::ConstVecMap v(x.val().data() + (bi * k + ki) * hw, hw);
      out[ki] += v.sum();
    }
  const int xi = x.idx;
  return x.tape->make(std::move(out), {x}, [xi, b, k, hw](Tape<S>& t, int self) {
    if (!t.needs_grad(xi)) return;
    const auto& g = t.grad_buf(self);
    auto& gx = t.grad_buf(xi);
    for (Index bi = 0; bi < b; ++bi)
      for (Index ki = 0; ki < k; ++ki) {
        typename Tensor<S>::VecMap v(gx.data() + (bi * k + ki) * hw, hw);
        v += g[ki];
      }
  });
}

}  // namespace ad

template <class S>
Var<S> operator+(Var<S> a, Var<S> b) { return ad::add(a, b); }
template <class S>
Var<S> operator-(Var<S> a, Var<S> b) { return ad::sub(a, b); }
template <class S>
Var<S> operator*(Var<S> a, Var<S> b) { return ad::mul(a, b); }
template <class S>
Var<S> operator*(S c, Var<S> a) { return ad::mul_scalar(a, c); }

}  // namespace cclseg
