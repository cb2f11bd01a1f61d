#pragma once

#include <functional>
#include <string>

#include "cclseg/tensor.hpp"

namespace cclseg {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  Index worst_coord = -1;
};

// Central-difference verification of an analytic gradient.
//   value_fn(x) -> scalar loss
//   grad_fn(x)  -> gradient tensor, same shape as x
// Coordinates where both gradients are below noise level (1e-6) are treated
// as matching; elsewhere rel err = |a-n| / (|a|+|n|).
template <class S, class ValueFn, class GradFn>
GradCheckReport grad_check(ValueFn&& value_fn, GradFn&& grad_fn,
                           const Tensor<S>& x, S step, S tol) {
  CCLSEG_REQUIRE(step > S(0), "grad_check: step must be positive");
  const Tensor<S> analytic = grad_fn(x);
  CCLSEG_REQUIRE(analytic.same_shape(x), "grad_check: gradient shape mismatch");

  GradCheckReport rep;
  Tensor<S> xp = x;
  for (Index i = 0; i < x.numel(); ++i) {
    const S orig = xp[i];
    xp[i] = orig + step;
    const double fp = static_cast<double>(value_fn(xp));
    xp[i] = orig - step;
    const double fm = static_cast<double>(value_fn(xp));
    xp[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite objective at coordinate " +
                               std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[i]);
    const double mag = std::max(std::abs(a), std::abs(numeric));
    const double rel = mag < 1e-6 ? 0.0 : std::abs(a - numeric) /
                                              (std::abs(a) + std::abs(numeric));
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = i;
    }
  }
  rep.pass = rep.max_rel_err <= static_cast<double>(tol);
  return rep;
}

}  // namespace cclseg
