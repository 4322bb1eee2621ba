#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "corrcount/tensor.hpp"

namespace corrcount {

struct AdamConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 4e-11;
};

/// Bias-corrected Adam over a fixed list of parameter tensors. Moment buffers
/// start at zero; the step counter advances by exactly one per update. A
/// non-finite gradient aborts the update before any state is touched and
/// names the offending parameter.
class AdamOptimizer {
 public:
  AdamOptimizer(AdamConfig cfg, const std::vector<Tensor>& params,
                std::vector<std::string> param_names = {});

  /// grads[i] must match params[i] elementwise; params are updated in place.
  void step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::string> names_;
  std::int64_t t_ = 0;
};

}  // namespace corrcount
