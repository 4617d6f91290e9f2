#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "nova/diffcore.hpp"

namespace nova {

/// Maximum over every element of `params` of
/// |analytic - central difference| / max(1, |central difference|).
/// `f` must rebuild its graph from the current parameter values on each call.
template <class Real>
Real grad_check(const std::function<Tensor<Real>()>& f, std::vector<Tensor<Real>> params, Real eps) {
  if (!(eps > 0)) throw PreconditionError("grad_check: eps must be positive");
  for (auto& p : params) p.zero_grad();
  auto value = [&f] {
    Tensor<Real> y = f();
    if (y.size() != 1) throw DimensionError("grad_check: f must be scalar, got " + shape_str(y.shape()));
    if (!std::isfinite(y.item())) throw EvaluationError("grad_check: non-finite objective");
    return y;
  };
  value().backward();
  Real worst = 0;
  for (auto& p : params) {
    std::vector<Real> analytic(p.size(), Real(0));
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Real keep = d[i];
      Real fp, fm;
      {
        NoGradGuard ng;
        d[i] = keep + eps;
        fp = value().item();
        d[i] = keep - eps;
        fm = value().item();
      }
      d[i] = keep;
      const Real fd = (fp - fm) / (Real(2) * eps);
      worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(Real(1), std::abs(fd)));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace nova
