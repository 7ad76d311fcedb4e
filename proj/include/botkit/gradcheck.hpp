#pragma once

#include <functional>
#include <string>
#include <vector>

#include "botkit/autodiff.hpp"
#include "botkit/ops.hpp"

namespace botkit {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param_index[coord]" of the worst coordinate
};

// Compares analytic leaf gradients of the scalar `forward(params)` against
// central finite differences with step h. Relative error per coordinate is
// |analytic - fd| / max(1, |analytic|). Leaves must be float64.
GradCheckResult grad_check(const std::function<Var(const std::vector<Var>&)>& forward,
                           std::vector<Var> params, double h = 1e-5);

}  // namespace botkit
