#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "remedi/tensor.hpp"

namespace remedi {

// Adam with decoupled weight decay. Moments keyed by parameter name; step
// order follows the (sorted) parameter map for reproducibility.
struct AdamW {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  int64_t t = 0;

  void step(std::map<std::string, Tensor>& params, double lr_override = -1.0,
            double grad_scale = 1.0) {
    ++t;
    double lr = lr_override >= 0.0 ? lr_override : learning_rate;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& m = moments1_[name];
      auto& v = moments2_[name];
      if (m.empty()) {
        m.assign(static_cast<size_t>(p.size()), 0.0);
        v.assign(static_cast<size_t>(p.size()), 0.0);
      }
      const std::vector<double>& grad = p.grad();
      double* pd = p.data();
      for (size_t i = 0; i < grad.size(); ++i) {
        double gi = grad[i] * grad_scale;
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        pd[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pd[i]);
      }
    }
  }

  static void zero_grads(std::map<std::string, Tensor>& params) {
    for (auto& [name, p] : params) p.zero_grad();
  }

 private:
  std::map<std::string, std::vector<double>> moments1_, moments2_;
};

}  // namespace remedi
