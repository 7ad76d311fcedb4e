#include "botkit/gradcheck.hpp"

#include <cmath>

namespace botkit {

GradCheckResult grad_check(const std::function<Var(const std::vector<Var>&)>& forward,
                           std::vector<Var> params, double h) {
  if (h < 1e-6 || h > 1e-4) throw ConfigError("grad_check: h must lie in [1e-6, 1e-4]");
  for (const Var& p : params) {
    if (p.value().dtype() != DType::f64) throw ConfigError("grad_check requires float64 leaves");
    if (!p.requires_grad()) throw ConfigError("grad_check: all leaves must require grad");
  }

  Var y = forward(params);
  if (y.value().numel() != 1) throw ShapeError("grad_check: forward must produce a scalar");
  if (!std::isfinite(y.value().item())) throw Error("grad_check: non-finite forward value");

  for (Var& p : params) p.zero_grad();
  backward(y, Tensor::scalar(1.0));

  GradCheckResult result;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Var& p = params[pi];
    Tensor analytic =
        p.has_grad() ? p.grad() : Tensor::zeros(p.value().shape(), DType::f64);
    Tensor theta = p.value();
    int64_t n = theta.numel();
    for (int64_t c = 0; c < n; ++c) {
      double orig = theta.data()[c];
      theta.mutable_data()[c] = orig + h;
      double fp = forward(params).value().item();
      theta.mutable_data()[c] = orig - h;
      double fm = forward(params).value().item();
      theta.mutable_data()[c] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("grad_check: non-finite forward value");
      double fd = (fp - fm) / (2.0 * h);
      double a = analytic.data()[c];
      double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst = "param" + std::to_string(pi) + "[" + std::to_string(c) + "]";
      }
    }
  }
  return result;
}

}  // namespace botkit
