#pragma once

// Test-only finite-difference oracle. Independent of the reverse-mode path:
// it re-evaluates the forward function at perturbed inputs with recording
// disabled and compares central differences against tape gradients.

#include <cmath>
#include <functional>
#include <vector>

#include "remedi/tensor.hpp"

namespace remedi::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

// f must return a scalar tensor built from the given inputs on the given
// graph. Inputs are perturbed in place for the numeric estimate.
inline GradCheckResult grad_check(
    const std::function<Tensor(Graph&, std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double h = 1e-5) {
  Graph g(true);
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor loss = f(g, inputs);
  g.backward(loss);

  GradCheckResult res;
  for (auto& t : inputs) {
    const std::vector<double>& analytic = t.grad();
    for (int64_t i = 0; i < t.size(); ++i) {
      double orig = t.data()[i];
      t.data()[i] = orig + h;
      Graph gp(false);
      double fp = f(gp, inputs).item();
      t.data()[i] = orig - h;
      Graph gm(false);
      double fm = f(gm, inputs).item();
      t.data()[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[static_cast<size_t>(i)];
      double denom = std::max(std::abs(a), std::abs(numeric));
      if (denom > 1e-6) {
        res.max_rel_err = std::max(res.max_rel_err, std::abs(a - numeric) / denom);
      } else if (std::abs(a - numeric) > 1e-7) {
        res.max_rel_err = std::max(res.max_rel_err, 1.0);  // both should be ~0
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace remedi::testing
