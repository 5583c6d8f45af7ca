#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msagcn/tensor.hpp"

namespace msagcn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t probes = 0;
  std::size_t branches = 0;  // non-differentiable decisions pinned during probing
};

inline constexpr double kGradStep = 1e-3;

// Compares analytic gradients against central finite differences.
//
// `loss` evaluates the scalar objective at the current parameter values.
// `analytic` must leave d(loss)/d(param) in every Parameter::grad (it is
// called once, after grads are zeroed). The step per element is
// h = 1e-3·(|θ|+1); central differences at h and h/2 are combined by one
// Richardson step, (4·D(h/2) − D(h))/3, which cancels the O(h²) term. Each
// parameter tensor is scored as
//   max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)
// and the result is the maximum over parameters.
//
// The network is only piecewise smooth, and θ can sit arbitrarily close to a
// kink. The branch decisions of the unperturbed pass are recorded and every
// probe replays them (see BranchLog), so the differences measure the smooth
// piece that the analytic gradient belongs to.
//
// `max_elements` > 0 limits each tensor to an evenly strided subset of that
// many entries.
inline GradCheckResult grad_check(const std::function<double()>& loss,
                                  const std::function<void()>& analytic,
                                  std::span<Parameter* const> params,
                                  std::size_t max_elements = 0) {
  for (Parameter* p : params) p->zero_grad();
  analytic();
  BranchLog log;
  if (!std::isfinite(loss())) throw NumericError("grad_check: non-finite loss");
  log.replay();

  GradCheckResult result;
  result.branches = log.size();
  for (Parameter* p : params) {
    if (!p->requires_grad) continue;
    if (!p->grad.all_finite()) {
      throw NumericError("grad_check: non-finite analytic gradient in " + p->name);
    }
    const std::size_t n = p->value.size();
    const std::size_t stride =
        (max_elements == 0 || n <= max_elements) ? 1 : (n + max_elements - 1) / max_elements;
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    auto at = [&](std::size_t i, double v) {
      const double theta = p->value[i];
      p->value[i] = v;
      log.replay();
      const double f = loss();
      p->value[i] = theta;
      if (!log.replay_complete()) throw Error("grad_check: branch count changed while perturbing " + p->name);
      if (!std::isfinite(f)) throw NumericError("grad_check: non-finite loss while perturbing " + p->name);
      return f;
    };
    for (std::size_t i = 0; i < n; i += stride) {
      const double theta = p->value[i];
      const double h = kGradStep * (std::abs(theta) + 1.0);
      const double d1 = (at(i, theta + h) - at(i, theta - h)) / (2.0 * h);
      const double d2 = (at(i, theta + h / 2) - at(i, theta - h / 2)) / h;
      const double numeric = (4.0 * d2 - d1) / 3.0;
      ++result.probes;
      const double a = p->grad[i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_a = std::max(max_a, std::abs(a));
      max_n = std::max(max_n, std::abs(numeric));
    }
    const double rel = max_diff / std::max({max_a, max_n, 1e-8});
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_parameter = p->name;
    }
  }
  return result;
}

}  // namespace msagcn
